import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from oracles import bracketed_slope, lambert_slope
from coopcensor import (
    ConvergenceError,
    CostModel,
    DegenerateScenarioError,
    ImportanceModel,
    RoutingTree,
    Scenario,
    build_line_scenario,
    build_pair_scenario,
    build_random_tree_scenario,
    build_single_node_scenario,
)
from coopcensor import asymptotic as A
from coopcensor.exact import solve_exact
from coopcensor.experiments import lifetime_sweep
from coopcensor.model import SINK, routed_costs

W_LINE2 = 0.28985077017569  # root of 0.5 w = 0.5 exp(-10 w) + 0.5 exp(-5 w)


def line2(e=(10000, 1000)):
    return build_line_scenario(n=2, E_S=1, E_R=5, E_T=5).with_energy(e)


# -- lifetimes ----------------------------------------------------------------


def test_lifetimes_with_everything_transmitted():
    est = A.stationary_lifetimes(line2(), np.zeros(2))
    np.testing.assert_allclose(est.g, [3.0, 8.0])
    np.testing.assert_allclose(est.T, [10000 / 3, 125.0])
    assert A.critical_node(est) == (1, 125.0)


def test_lifetimes_with_everything_censored():
    sc = build_line_scenario(n=4).with_energy([100, 100, 100, 0])
    est = A.stationary_lifetimes(sc, np.full(4, np.inf))
    np.testing.assert_allclose(est.g, sc.costs.C0 @ sc.source_probs)
    assert est.g[0] == sc.source_probs[0] * 1
    assert est.T[3] == 0.0


@given(seed=st.integers(0, 10_000), mu=st.floats(0.0, 5.0))
def test_lifetime_times_consumption_is_energy(seed, mu):
    sc = build_random_tree_scenario(n=12, seed=seed)
    e = np.random.default_rng(seed).integers(1, 50_000, size=12)
    est = A.stationary_lifetimes(sc, np.full(12, mu), e)
    np.testing.assert_allclose(est.T * est.g, e, rtol=1e-14)


def test_idle_node_never_dies():
    tree = RoutingTree(np.array([SINK, SINK]))
    sc = Scenario(tree, CostModel([[1, 0], [0, 0]], [[3, 0], [0, 2]]), np.array([0.0, 1.0, 0.0]),
                  ImportanceModel.exponential(), np.array([10, 10]))
    est = A.stationary_lifetimes(sc, np.zeros(2))
    assert math.isinf(est.T[1])


@pytest.mark.parametrize("T,want", [((3333.33, 125.0), (1, 125.0)), ((5.0, 5.0), (0, 5.0)),
                                    ((np.inf, 7.0), (1, 7.0))])
def test_critical_node(T, want):
    assert A.critical_node(np.array(T)) == want


def test_all_infinite_lifetimes_are_degenerate():
    with pytest.raises(DegenerateScenarioError):
        A.critical_node(np.array([np.inf, np.inf]))


# -- graph split ----------------------------------------------------------------


def test_split_two_node_line():
    tree = RoutingTree.chain(2)
    assert A.split_graph(tree, 1) == ((0,), ())
    assert A.split_graph(tree, 0) == ((), (1,))


def test_split_fifteen_node_tree():
    # 1-based parents (0 = sink): the subtree under node 1 is {3,4,5,8,9,11,15}
    parents = {1: 0, 2: 0, 3: 1, 4: 1, 5: 3, 6: 2, 7: 2, 8: 4, 9: 5, 10: 6, 11: 8, 12: 7, 13: 10, 14: 12, 15: 9}
    tree = RoutingTree(np.array([parents[k] - 1 for k in range(1, 16)]))
    D, S = A.split_graph(tree, 0)
    assert {d + 1 for d in D} == {3, 4, 5, 8, 9, 11, 15}
    assert {s + 1 for s in S} == {2, 6, 7, 10, 12, 13, 14}


# -- slope equation ----------------------------------------------------------------


def test_single_node_slope_is_omega_constant():
    assert abs(A.solve_w_i(build_single_node_scenario(), 0) - 0.5671432904097838) <= 1e-9


@given(c0=st.integers(1, 10), extra=st.integers(1, 30))
def test_single_node_slope_matches_lambert(c0, extra):
    sc = build_single_node_scenario(c0=c0, c1=c0 + extra)
    assert math.isclose(A.solve_w_i(sc, 0), lambert_slope(c0, c0 + extra), rel_tol=1e-8)


def test_two_node_line_sink_neighbour_slope():
    sc = line2()
    w = A.solve_w_i(sc, 1)
    want = bracketed_slope(sc.c_bar[1], 0.0, sc.delta[:, 1], np.zeros(2), sc.source_probs, sc.importance)
    assert abs(w - want) <= 1e-9
    assert abs(w - W_LINE2) < 1e-6
    assert abs(w - 0.2897) < 2e-4  # the commonly quoted four-digit value


@given(seed=st.integers(0, 1000), alpha=st.floats(0.0, 2.0), scale=st.floats(0.0, 1.0),
       discrete=st.booleans())
def test_slope_matches_bracketing_oracle(seed, alpha, scale, discrete):
    imp = ImportanceModel.discrete([0.2, 1.0, 3.5], [0.5, 0.3, 0.2]) if discrete else ImportanceModel.exponential(1.3)
    sc = build_random_tree_scenario(n=6, seed=seed, importance=imp)
    rng = np.random.default_rng(seed)
    i = int(rng.integers(6))
    beta = scale * rng.random(6) * 3
    w = A.solve_w_i(sc, i, alpha, beta)
    want = bracketed_slope(sc.c_bar[i], alpha, sc.delta[:, i], beta, sc.source_probs, sc.importance)
    assert abs(w - want) <= 1e-8


def test_zero_importance_gives_zero_slope():
    sc = build_single_node_scenario(importance=ImportanceModel.discrete([0.0], [1.0]))
    assert A.solve_w_i(sc, 0) == 0.0
    assert A.solve_w_i(sc, 0, alpha=3.0) == 0.0


def test_no_censoring_cost_is_degenerate():
    sc = build_single_node_scenario(c0=0, c1=2)
    with pytest.raises(DegenerateScenarioError):
        A.solve_w_i(sc, 0)


# -- thresholds and the fixed point ------------------------------------------------


def test_thresholds_for_the_sink_neighbour():
    sc = line2()
    step = A.thresholds(sc, 1, 125.0)
    np.testing.assert_allclose(step.w, [0.0, W_LINE2], atol=5e-5)
    np.testing.assert_allclose(step.mu, [10 * W_LINE2, 5 * W_LINE2], atol=5e-4)
    assert step.partition.disconnected == (0,) and step.partition.surviving == ()


def test_main_on_two_node_line():
    sol = A.main(line2())
    assert sol.iterations <= 3
    assert sol.partition.critical == 1
    np.testing.assert_allclose(sol.mu, [10 * W_LINE2, 5 * W_LINE2], rtol=1e-8)
    est = A.stationary_lifetimes(line2(), sol.mu)
    # hand-iterated reference values, quoted to four significant digits
    np.testing.assert_allclose(sol.mu, [2.897, 1.448], rtol=1e-3)
    np.testing.assert_allclose(est.g, [0.6375, 1.3616], rtol=1e-3)
    np.testing.assert_allclose(est.T, [15686, 734], rtol=1e-3)
    mu, w = sol
    np.testing.assert_array_equal(mu, sol.mu)


def test_main_single_node_needs_one_iteration():
    sc = build_single_node_scenario()
    sol = A.main(sc)
    assert sol.iterations == 1
    assert sol.mu[0] == sc.delta[0, 0] * A.solve_w_i(sc, 0)


def test_independent_branch_solved_standalone():
    tree = RoutingTree(np.array([1, SINK, 3, SINK]))
    sc = Scenario(tree, routed_costs(tree, 1, 5, 5), np.r_[0.0, np.full(4, 0.25)],
                  ImportanceModel.exponential(), np.array([5000, 500, 40000, 40000]))
    sol = A.main(sc)
    assert sol.partition.critical == 1
    S = list(sol.partition.surviving)
    assert S == [2, 3]
    T_i = sol.partition.lifetime
    g = A.expected_consumption(sc, sol.mu)
    alone = A.main(sc.subnetwork(S), np.clip(sc.initial_energy[S] - T_i * g[S], 0, None))
    np.testing.assert_allclose(sol.w[S], alone.w, rtol=1e-9)


def test_iteration_cap_raises_with_trace():
    with pytest.raises(ConvergenceError) as info:
        A.main(line2(), max_iter=1)
    assert len(info.value.trace) == 1


def test_trace_text():
    text = A.format_trace(A.main(line2()))
    assert text.startswith("iter 1: critical=2")
    assert text.splitlines()[-1] == "chain: 2"


def test_local_thresholds_use_own_costs():
    sc = build_line_scenario(n=5)
    mu = A.local_thresholds(sc)
    # each node alone: censor costs 1, transmitting its own message costs 5 more
    np.testing.assert_allclose(mu, 5 * lambert_slope(1, 6), rtol=1e-8)


def test_validity_floor_flag():
    assert A.main(line2(), validity_floor=100).regime_valid
    assert not A.main(line2((10000, 50)), validity_floor=100).regime_valid


tree_cases = st.tuples(st.integers(0, 10_000), st.integers(3, 14))


def random_case(seed, n):
    rng = np.random.default_rng(seed)
    sc = build_random_tree_scenario(n=n, seed=seed)
    return sc.with_energy(rng.integers(500, 20_000, size=n))


@given(case=tree_cases)
def test_solution_invariants(case):
    sc = random_case(*case)
    sol = A.main(sc)
    part = sol.partition
    everything = sorted((part.critical, *part.disconnected, *part.surviving))
    assert everything == list(range(sc.n_nodes))
    assert set(part.disconnected) == set(sc.tree.descendants(part.critical))
    assert np.all(sol.w >= 0)
    assert np.all(sol.w[list(part.disconnected)] == 0)
    np.testing.assert_array_equal(sol.mu, sc.delta @ sol.w)
    assert np.all(sol.mu >= 0)
    assert sol.chain[0] == part.critical


@given(case=tree_cases)
def test_fixed_point(case):
    sc = random_case(*case)
    sol = A.main(sc)
    assume(not sol.oscillating)
    est = A.stationary_lifetimes(sc, sol.mu)
    i, T_i = A.critical_node(est)
    assert i == sol.partition.critical
    # sub-levels can have several self-consistent critical nodes, so the map
    # is re-evaluated from the returned state rather than from zero
    again = A.thresholds(sc, i, T_i, mu_in_force=sol.mu, w_hint=sol.w)
    assert np.max(np.abs(again.mu - sol.mu)) <= 1e-8


@given(case=tree_cases, factor=st.integers(2, 50), pick=st.integers(0, 100))
def test_disconnected_energy_is_irrelevant(case, factor, pick):
    sc = random_case(*case)
    sol = A.main(sc)
    D = sol.partition.disconnected
    assume(D)
    d = D[pick % len(D)]
    e = sc.initial_energy.copy()
    e[d] *= factor
    other = A.main(sc.with_energy(e))
    np.testing.assert_array_equal(other.mu, sol.mu)
    np.testing.assert_array_equal(other.w, sol.w)


@given(case=tree_cases, c=st.integers(2, 20))
def test_common_scaling_keeps_thresholds(case, c):
    sc = random_case(*case)
    sol = A.main(sc)
    big = A.main(sc.with_energy(sc.initial_energy * c))
    assert big.partition.critical == sol.partition.critical
    assume(big.chain == sol.chain)
    np.testing.assert_allclose(big.mu, sol.mu, rtol=1e-7, atol=1e-9)


# -- agreement with the exact solver ---------------------------------------------------


@pytest.fixture(scope="module")
def pair_exact():
    return solve_exact(build_pair_scenario(), 1000)


@pytest.mark.parametrize("e", [(200, 50), (50, 200), (1000, 100), (100, 1000), (800, 150), (150, 800)])
def test_plateaus_match_exact_solver(pair_exact, e):
    sc = build_pair_scenario()
    sol = A.main(sc, np.array(e, dtype=float))
    exact_mu = np.array([pair_exact.threshold(e, j) for j in range(2)])
    np.testing.assert_allclose(sol.mu, exact_mu, rtol=0.05)


def test_two_plateaus_differ():
    sc = build_pair_scenario()
    a = A.main(sc, np.array([1000.0, 100.0]))
    b = A.main(sc, np.array([100.0, 1000.0]))
    assert a.partition.critical != b.partition.critical
    assert np.max(np.abs(a.mu - b.mu)) > 0.1


def test_mixed_band_equalizes_lifetimes():
    res = lifetime_sweep(build_pair_scenario(), radius=1e4, steps=200)
    sc = build_pair_scenario()
    seen = 0
    for e in res.energy:
        sol = A.main(sc, e)
        if sol.oscillating:
            seen += 1
            T = A.stationary_lifetimes(sc, sol.mu, e).T
            assert math.isclose(T[0], T[1], rel_tol=1e-9)
    assert seen > 0
    assert res.critical[0] == 1  # e_2 small: node 2 dies first
    assert res.critical[-1] == 0
