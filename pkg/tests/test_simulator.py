import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coopcensor import (
    CostModel,
    FixedThreshold,
    GlobalCooperative,
    ImportanceModel,
    LocalThreshold,
    NonSelective,
    RoutingTree,
    Scenario,
    ScenarioError,
    build_line_scenario,
    build_random_tree_scenario,
    build_single_node_scenario,
)
from coopcensor import asymptotic as A
from coopcensor import simulator as S
from coopcensor.model import SINK


class ScriptedStreams:
    """Stand-in for RunStreams that replays given (u, x) pairs."""

    def __init__(self, draws, n):
        self.draws = list(draws)
        self.n = n

    def draw(self, epoch):
        u, x = self.draws[epoch]
        return u, np.full(1, x)


def run_to_end(scenario, strategy, seed):
    """Reference loop over run_epoch, recomputing thresholds only once."""
    state = S.SimState.initial(scenario)
    tab = S._Tables(scenario)
    streams = S.RunStreams(seed, tab.models)
    mu, _ = strategy.thresholds(scenario, state.e.copy(), S.connected_mask(scenario, state.e))
    records, rewards = [], [0.0]
    while not np.all(state.e[tab.sink_nb] == 0):
        state, rec = S.run_epoch(state, scenario, mu, streams, tab)
        records.append(rec)
        rewards.append(float(state.reward[0]))
    return state, records, rewards


STRATEGY_FACTORIES = [NonSelective, LocalThreshold, GlobalCooperative, lambda: FixedThreshold(1.2)]


# -- one epoch -----------------------------------------------------------------


def test_failed_transmission_charges_up_to_the_blocking_node():
    sc = build_line_scenario(n=3, E_S=1, E_R=5, E_T=5).with_energy([20, 3, 50])
    state = S.SimState.initial(sc)
    streams = ScriptedStreams([(0.1, 2.0)], 3)  # source 0 with importance 2
    new, rec = S.run_epoch(state, sc, np.zeros(3), streams)
    assert (rec.source, rec.action, rec.success) == (0, 1, 0)
    np.testing.assert_array_equal(new.e, [14, 0, 50])
    assert rec.charged == 6 + 3
    assert new.counters[S._LOST] == 1 and new.reward[0] == 0.0
    assert new.death[1] == 1
    np.testing.assert_array_equal(state.e, [20, 3, 50])  # input state untouched


def test_successful_transmission_books_reward():
    sc = build_line_scenario(n=2).with_energy([20, 30])
    streams = ScriptedStreams([(0.9, 1.7)], 2)  # source 1
    new, rec = S.run_epoch(S.SimState.initial(sc), sc, np.array([5.0, 1.0]), streams)
    assert (rec.source, rec.action, rec.success) == (1, 1, 1)
    np.testing.assert_array_equal(new.e, [20, 24])
    assert new.reward[0] == 1.7


def test_censored_message_costs_sensing_only():
    sc = build_line_scenario(n=2).with_energy([20, 30])
    streams = ScriptedStreams([(0.1, 0.3)], 2)
    new, rec = S.run_epoch(S.SimState.initial(sc), sc, np.array([1.0, 1.0]), streams)
    assert rec.action == 0
    np.testing.assert_array_equal(new.e, [19, 30])
    assert new.counters[S._DISC] == 1


def test_off_route_transmit_cost_is_paid():
    # node 1 overhears node 0's transmissions although it is not on the route
    tree = RoutingTree(np.array([SINK, SINK]))
    costs = CostModel([[1, 0], [0, 1]], [[4, 0], [2, 3]])
    sc = Scenario(tree, costs, np.array([0.0, 0.5, 0.5]), ImportanceModel.exponential(), np.array([10, 10]))
    new, rec = S.run_epoch(S.SimState.initial(sc), sc, np.zeros(2), ScriptedStreams([(0.2, 1.0)], 2))
    np.testing.assert_array_equal(new.e, [6, 8])
    assert rec.success == 1


def test_silent_epoch_charges_background_cost():
    tree = RoutingTree.chain(1)
    sc = Scenario(tree, CostModel([[1]], [[3]], [2]), np.array([0.5, 0.5]), ImportanceModel.exponential(),
                  np.array([9]))
    new, rec = S.run_epoch(S.SimState.initial(sc), sc, np.zeros(1), ScriptedStreams([(0.2, 1.0)], 1))
    assert rec.source == -1 and rec.charged == 2
    assert new.e[0] == 7
    assert new.counters[S._GEN] == 0


def test_cut_off_sources_never_fire():
    tree = RoutingTree(np.array([1, SINK, SINK]))
    sc = build_line_scenario(n=3)
    sc = Scenario(tree, sc.costs, sc.p, sc.importance, np.array([500, 0, 500]))
    state, records, _ = run_to_end(sc, NonSelective(), seed=3)
    sources = {r.source for r in records}
    assert sources <= {-1, 2}
    assert 2 in sources


# -- whole runs -------------------------------------------------------------------


def test_single_node_delivers_two_messages():
    sc = build_single_node_scenario(c0=1, c1=6, battery=12)
    m = S.simulate(sc, NonSelective(), seed=0)
    assert (m.generated, m.received, m.lifetime_epochs) == (2, 2, 2)


def test_empty_battery_generates_nothing():
    m = S.simulate(build_line_scenario(n=3, battery=0), "NS", seed=0)
    assert (m.generated, m.importance_sum, m.lifetime_epochs) == (0, 0.0, 0)


def test_censoring_everything_lasts_battery_over_sensing_cost():
    m = S.simulate(build_single_node_scenario(c0=1, c1=2, battery=50), FixedThreshold(np.inf), seed=0)
    assert (m.generated, m.discarded, m.received, m.lifetime_epochs) == (50, 50, 0, 50)


@pytest.mark.parametrize("make", STRATEGY_FACTORIES)
def test_reference_loop_matches_simulate(make):
    sc = build_line_scenario(n=4, battery=1500)
    strategy = make()
    if isinstance(strategy, GlobalCooperative):
        strategy = GlobalCooperative(refresh_every=None)
        strategy.watch_critical = False  # thresholds fixed for the whole run
    state, records, rewards = run_to_end(sc, strategy, seed=5)
    m = S.simulate(sc, strategy, seed=5)
    assert m.lifetime_epochs == len(records)
    assert m.received == sum(r.success for r in records)
    assert math.isclose(m.importance_sum, sum(r.importance for r in records if r.action and r.success),
                        rel_tol=1e-12)
    assert m.importance_sum == rewards[-1]
    assert all(b >= a for a, b in zip(rewards, rewards[1:]))
    assert m.energy_charged == sum(r.charged for r in records)


@pytest.mark.parametrize("make", STRATEGY_FACTORIES)
@pytest.mark.parametrize("scenario", [build_line_scenario(n=4, battery=2000),
                                      build_random_tree_scenario(n=8, seed=2, battery=1500)],
                         ids=["line", "tree"])
def test_compiled_and_reference_engines_agree(make, scenario):
    fast = S.simulate(scenario, make(), seed=11, record_refreshes=True)
    slow = S.simulate(scenario, make(), seed=11, engine="python", record_refreshes=True)
    assert fast == slow
    assert [r.epoch for r in fast.refreshes] == [r.epoch for r in slow.refreshes]


@given(seed=st.integers(0, 2**40), n=st.integers(1, 8), tree_seed=st.integers(0, 50),
       strategy=st.sampled_from(["NS", "ST", "GCT"]))
def test_run_bookkeeping(seed, n, tree_seed, strategy):
    sc = build_random_tree_scenario(n=n, seed=tree_seed, battery=800)
    m = S.simulate(sc, strategy, seed=seed)
    assert m.generated == m.received + m.discarded + m.lost
    assert m.importance_sum >= 0
    assert m.energy_charged <= int(sc.initial_energy.sum())
    # the run ends in the epoch the last sink neighbour runs dry
    assert max(m.node_death_epochs[i] for i in sc.tree.sink_neighbors) == m.lifetime_epochs


@given(seed=st.integers(0, 2**40), strategy=st.sampled_from(["NS", "ST", "GCT"]))
def test_energy_accounting(seed, strategy):
    sc = build_random_tree_scenario(n=6, seed=seed % 97, battery=600)
    strategy = S.strategy_from_name(strategy)
    tab = S._Tables(sc)
    streams = S.RunStreams(seed, tab.models)
    state = S.SimState.initial(sc)
    mu, _ = strategy.thresholds(sc, state.e.copy(), S.connected_mask(sc, state.e))
    charged = 0
    for _ in range(3000):
        if np.all(state.e[tab.sink_nb] == 0):
            break
        state, rec = S.run_epoch(state, sc, mu, streams, tab)
        charged += rec.charged
        assert np.all(state.e >= 0)
    assert int(sc.initial_energy.sum() - state.e.sum()) == charged == int(state.counters[S._CHARGED])


def test_same_seed_same_metrics():
    sc = build_random_tree_scenario(n=10, seed=7, battery=3000)
    a = S.simulate(sc, "GCT", seed=42)
    b = S.simulate(sc, "GCT", seed=42)
    c = S.simulate(sc, "GCT", seed=43)
    assert a == b
    assert a != c


def test_gct_refreshes_replay_exactly():
    sc = build_random_tree_scenario(n=12, seed=5, battery=4000)
    strategy = GlobalCooperative()
    m = S.simulate(sc, strategy, seed=9, record_refreshes=True)
    assert len(m.refreshes) > 3
    for r in m.refreshes:
        mu, _ = strategy.thresholds(sc, r.energy, r.connected, r.previous)
        np.testing.assert_array_equal(mu, r.mu)
        nodes = np.flatnonzero(r.connected)
        start = None if r.previous is None else r.previous[nodes]
        sol = A.main(sc.subnetwork(nodes), r.energy[nodes].astype(float), initial_mu=start,
                     canonical=r.previous is None)
        np.testing.assert_array_equal(r.mu[nodes], sol.mu)
        assert np.all(np.isinf(r.mu[~r.connected]))


def test_gct_refreshes_on_schedule_and_on_deaths():
    sc = build_line_scenario(n=5, battery=3000)
    m = S.simulate(sc, GlobalCooperative(refresh_every=200), seed=1, record_refreshes=True)
    epochs = [r.epoch for r in m.refreshes]
    assert epochs[0] == 0
    assert all(b - a <= 200 for a, b in zip(epochs, epochs[1:]))
    deaths = sorted(d for d in m.node_death_epochs if 0 <= d < m.lifetime_epochs)
    assert set(deaths) <= set(epochs)


def test_fractional_silent_cost_is_rejected():
    sc = Scenario(RoutingTree.chain(1), CostModel([[1]], [[2]], [0.5]), np.array([0.5, 0.5]),
                  ImportanceModel.exponential(), np.array([10]))
    with pytest.raises(ScenarioError):
        S.simulate(sc, "NS")


def test_unknown_strategy():
    with pytest.raises(ScenarioError):
        S.strategy_from_name("CT")


# -- random streams -----------------------------------------------------------------


def test_streams_are_position_addressed():
    models = (ImportanceModel.exponential(2.0),)
    s = S.RunStreams(123, models)
    late = [s.draw(k) for k in (0, 1, S.CHUNK - 1, S.CHUNK, 3 * S.CHUNK + 5)]
    ref = np.random.Generator(np.random.Philox(np.random.SeedSequence(123, spawn_key=(0,)))).random(4 * S.CHUNK)
    imp = np.random.Generator(np.random.Philox(np.random.SeedSequence(123, spawn_key=(1,)))).random(4 * S.CHUNK)
    for (u, x), k in zip(late, (0, 1, S.CHUNK - 1, S.CHUNK, 3 * S.CHUNK + 5)):
        assert u == ref[k]
        assert x[0] == models[0].from_uniform(imp[k])


def test_derived_seeds_are_distinct_and_stable():
    seeds = {S.derive_seed(0, k, p) for k in range(200) for p in (0, 1)}
    assert len(seeds) == 400
    assert S.derive_seed(5, 3) == S.derive_seed(5, 3)
    assert all(0 <= s < 2**63 for s in seeds)


# -- replications --------------------------------------------------------------------


def test_aggregate_uses_student_t():
    vals = np.arange(100, dtype=float)
    agg = S.aggregate(vals)
    half = 1.9842169515086827 * vals.std(ddof=1) / 10
    assert math.isclose(agg.ci_high - agg.mean, half, rel_tol=1e-12)
    single = S.aggregate([3.5])
    assert (single.mean, single.std, single.ci_low, single.ci_high) == (3.5, 0.0, 3.5, 3.5)


def test_replications_do_not_depend_on_scheduling():
    sc = build_line_scenario(n=4, battery=2000)
    serial = S.run_replications(sc, "ST", 4, base_seed=3)
    pooled = S.run_replications(sc, "ST", 4, base_seed=3, workers=2)
    assert serial.runs == pooled.runs
    assert serial.summary == pooled.summary
    assert [m.seed for m in serial.runs] == [S.derive_seed(3, r) for r in range(4)]


def test_single_replication_summary():
    res = S.run_replications(build_line_scenario(n=3, battery=1000), "NS", 1)
    agg = res["received"]
    assert agg.std == 0.0 and agg.mean == res.runs[0].received


def test_base_seeds_agree_statistically():
    sc = build_line_scenario(n=10)
    a = S.run_replications(sc, "NS", 30, base_seed=1)["received"]
    b = S.run_replications(sc, "NS", 30, base_seed=2)["received"]
    assert a.overlaps(b)
