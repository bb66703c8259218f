"""Asymptotic constant thresholds from the critical-node recursion.

For large batteries the optimal threshold surface is piecewise constant and
the value function is close to linear, ``lambda(e) ~ w.e + w0``, inside each
constant region.  The thresholds are then ``mu = Delta w`` and ``w`` is fixed
by which node is expected to deplete first (the critical node ``i``):

* nodes routed through ``i`` cannot use extra energy, so ``w_D = 0``;
* the surviving subnetwork is solved recursively with the energy it is
  expected to have left when ``i`` dies, giving ``w_S``;
* ``w_i`` is the unique root of
  ``cbar_i w_i + cbar_S.w_S = sum_j p_j h_j(Delta_ji w_i + (Delta_S w_S)_j)``.

``main`` alternates critical-node identification and threshold computation
until the thresholds stop changing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ._numeric import bisect_slope, importance_arrays
from .errors import ConvergenceError, DegenerateScenarioError
from .model import CostModel, RoutingTree, Scenario

log = logging.getLogger(__name__)

ROOT_TOL = 1e-10
MU_TOL = 1e-8
MAX_ITER = 100
MAX_PERIOD = 8
RELAX_AFTER = 20


@dataclass(frozen=True)
class LifetimeEstimate:
    T: np.ndarray  # epochs until depletion, per node
    g: np.ndarray  # expected consumption per epoch, per node


@dataclass(frozen=True)
class NodePartition:
    critical: int
    lifetime: float
    disconnected: tuple
    surviving: tuple


@dataclass(frozen=True)
class TraceStep:
    iteration: int
    critical: int
    lifetime: float
    mu: np.ndarray


@dataclass(frozen=True, eq=False)
class AsymptoticSolution:
    """Constant thresholds ``mu`` (per source) and energy slopes ``w`` (per node).

    ``chain`` lists the critical node of every recursion level, outermost
    first, in the caller's node indices; ``horizons`` the lifetime of each
    of those nodes.  ``oscillating`` is set when the iteration ended in a
    cycle (see ``main``).
    """

    mu: np.ndarray
    w: np.ndarray
    partition: NodePartition
    chain: tuple
    iterations: int
    trace: tuple = field(repr=False)
    oscillating: bool = False
    regime_valid: bool = True
    horizons: tuple = ()

    def __iter__(self):
        # allows ``mu, w = main(...)``
        return iter((self.mu, self.w))


def _success(scenario, q):
    if q is None:
        return np.ones(scenario.n_nodes)
    return np.broadcast_to(np.asarray(q, dtype=float), (scenario.n_nodes,))


def _scaled(mu, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(q > 0, mu / np.where(q > 0, q, 1.0), np.where(mu <= 0, -np.inf, np.inf))


def acceptance_probs(scenario, mu, q=None):
    """F_j = P(Q_j x >= mu_j | y = j)."""
    q = _success(scenario, q)
    return scenario.tail(_scaled(np.asarray(mu, dtype=float), q))


def expected_reward(scenario, t, q=None):
    """Per-source h_j(t_j) = E{(Q_j x - t_j)^+ | y = j}."""
    q = _success(scenario, q)
    t = np.asarray(t, dtype=float)
    pe = scenario.partial_expectation(_scaled(t, q))
    return np.where(q > 0, q * pe, np.clip(-t, 0.0, None))


def expected_consumption(scenario, mu, q=None):
    """Mean energy each node spends per epoch under constant thresholds."""
    F = acceptance_probs(scenario, mu, q)
    C0, C1 = scenario.costs.C0, scenario.costs.C1
    return scenario.c_bar + (C1 - C0) @ (F * scenario.source_probs)


def stationary_lifetimes(scenario, mu, e=None, q=None):
    """Renewal-theorem lifetimes ``T_i = e_i / E{g_i}`` under thresholds ``mu``.

    A node that never consumes gets an infinite lifetime; a node with no
    energy gets zero.
    """
    e = scenario.initial_energy if e is None else np.asarray(e, dtype=float)
    g = expected_consumption(scenario, mu, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        T = np.where(g > 0, e / np.where(g > 0, g, 1.0), np.inf)
    T = np.where(e <= 0, 0.0, T)
    return LifetimeEstimate(T=T, g=g)


def critical_node(lifetimes):
    """``(i, T_i)`` with the smallest lifetime; ties go to the lowest index."""
    T = np.asarray(getattr(lifetimes, "T", lifetimes), dtype=float)
    if T.size == 0 or not np.any(np.isfinite(T)):
        raise DegenerateScenarioError("no node ever depletes its battery")
    i = int(np.argmin(T))
    return i, float(T[i])


def split_graph(tree, i):
    """``(D, S)``: nodes routed through ``i``, and everybody else but ``i``."""
    D = tree.descendants(i)
    skip = set(D) | {i}
    S = tuple(j for j in range(tree.n_nodes) if j not in skip)
    return D, S


def solve_w_i(scenario, i, alpha=0.0, beta=None, q=None, tol=ROOT_TOL):
    """Slope of the critical node: root of ``cbar_i w + alpha = p.h(Delta_i w + beta)``.

    The left side grows strictly with ``w`` and the right side does not
    grow, so bisection on ``[0, (p.h(beta) - alpha) / cbar_i]`` brackets the
    unique root.  When the root would be negative the slope is clamped to 0.
    """
    cbar = float(scenario.c_bar[i])
    if not cbar > 0:
        raise DegenerateScenarioError(f"node {i} has no censoring cost; its energy slope is unbounded")
    n = scenario.n_nodes
    beta = np.zeros(n) if beta is None else np.asarray(beta, dtype=float)
    col = scenario.delta[:, i].astype(float)
    p = scenario.source_probs
    q = _success(scenario, q).astype(float)
    kinds, means, vals, probs = importance_arrays(tuple(scenario.importance))
    # sources whose reward does not move with w add a constant to both sides
    moving = (col != 0) & (p > 0)
    fixed = ~moving & (p > 0)
    const = float(p[fixed] @ expected_reward(scenario, beta, q)[fixed]) if fixed.any() else 0.0
    k = np.flatnonzero(moving)
    w = bisect_slope(cbar, float(alpha) - const, col[k], beta[k], p[k], q[k],
                     kinds[k], means[k], vals[k], probs[k], tol)
    if w < 0:
        raise ConvergenceError(f"root of the slope equation for node {i} is not bracketed")
    return float(w)


@lru_cache(maxsize=4096)
def _subnetwork(scenario, nodes):
    return scenario.subnetwork(nodes)


@dataclass(frozen=True, eq=False)
class _Step:
    mu: np.ndarray
    w: np.ndarray
    partition: NodePartition
    chain: tuple
    horizons: tuple  # lifetime of the critical node at each level of ``chain``


def thresholds(scenario, i, T_i, e=None, mu_in_force=None, q=None, w_hint=None):
    """Thresholds and slopes given the critical node ``i`` and its lifetime.

    ``mu_in_force`` are the thresholds under which ``T_i`` was computed; they
    set the consumption of the surviving nodes until ``i`` dies.
    ``w_hint`` (slopes from a nearby solution) seeds the recursive solve of
    the surviving subnetwork.
    """
    n = scenario.n_nodes
    e = scenario.initial_energy.astype(float) if e is None else np.asarray(e, dtype=float)
    mu_in_force = np.zeros(n) if mu_in_force is None else np.asarray(mu_in_force, dtype=float)
    D, S = split_graph(scenario.tree, i)
    delta = scenario.delta
    cbar = scenario.c_bar
    w = np.zeros(n)
    beta = np.zeros(n)
    alpha = 0.0
    chain = (i,)
    horizons = (float(T_i),)
    if S:
        S_idx = np.array(S)
        g = expected_consumption(scenario, mu_in_force, q)
        e_left = np.clip(e[S_idx] - T_i * g[S_idx], 0.0, None)
        sub = _subnetwork(scenario, S)
        sub_q = None if q is None else _success(scenario, q)[S_idx]
        start = None if w_hint is None else sub.delta @ np.asarray(w_hint, dtype=float)[S_idx]
        # the inputs of this call are already canonical once the caller's are
        sol = main(sub, e_left, q=sub_q, initial_mu=start, canonical=False, blend=False)
        w[S_idx] = sol.w
        alpha = float(cbar[S_idx] @ sol.w)
        beta = delta[:, S_idx] @ sol.w
        chain = chain + tuple(S[k] for k in sol.chain)
        horizons = horizons + sol.horizons
    w[i] = solve_w_i(scenario, i, alpha, beta, q)
    mu = delta @ w
    return _Step(mu=mu, w=w, partition=NodePartition(i, float(T_i), D, S), chain=chain, horizons=horizons)


def main(scenario, e=None, q=None, initial_mu=None, tol=MU_TOL, max_iter=MAX_ITER, validity_floor=0.0,
         canonical=True, blend=True):
    """Constant thresholds for energy state ``e`` (defaults to the scenario's batteries).

    Starting from ``initial_mu`` (all zeros unless given), alternate
    critical-node identification and threshold computation until the
    thresholds move by at most ``tol``.  After ``RELAX_AFTER`` plain steps
    the thresholds in force move only halfway to each new iterate, which
    tames slowly decaying oscillations without moving the fixed point.

    Once settled, the answer is recomputed from zero thresholds with the
    final critical node held fixed, unless the iteration already took that
    route or ``canonical`` is False.  The result therefore depends only on
    the critical node and on the energies that enter its computation; in
    particular it does not depend on nodes routed through the critical node.

    The iteration can also enter a short cycle of states.  If it alternates
    between two states with different critical nodes, each one's thresholds
    make the other's critical node die first; the result is then the mix of
    the two threshold vectors under which both nodes have the same lifetime
    (unless ``blend`` is False).  For any other cycle the member whose
    critical nodes die soonest (compared level by level) is kept.  Either
    way the solution is flagged ``oscillating=True``.

    Surviving subnetworks are solved with ``canonical=False, blend=False``:
    their inputs are canonical once the caller's are, and piecewise-constant
    sub-solutions keep the number of iterations per level small.
    """
    n = scenario.n_nodes
    e = scenario.initial_energy.astype(float) if e is None else np.asarray(e, dtype=float)
    if n == 1:
        # the only node is critical whatever the thresholds
        step = thresholds(scenario, 0, 0.0, e, q=q)
        T = float(stationary_lifetimes(scenario, step.mu, e, q).T[0])
        step = _Step(step.mu, step.w, NodePartition(0, T, (), ()), (0,), (T,))
        return _finish(step, 1, [TraceStep(1, 0, T, step.mu)], False, e, validity_floor)
    mu = np.zeros(n) if initial_mu is None else np.asarray(initial_mu, dtype=float)
    w_prev = None
    steps, trace = [], []
    for it in range(1, max_iter + 1):
        mu0 = mu
        i, T_i = critical_node(stationary_lifetimes(scenario, mu0, e, q))
        step = thresholds(scenario, i, T_i, e, mu0, q, w_hint=w_prev)
        w_prev = step.w
        steps.append(step)
        trace.append(TraceStep(it, i, T_i, step.mu))
        if np.max(np.abs(step.mu - mu0), initial=0.0) <= tol:
            direct = initial_mu is None and all(t.critical == i for t in trace)
            if canonical and not direct:
                step = _settle(scenario, i, e, q, tol, max_iter) or step
            return _finish(step, it, trace, False, e, validity_floor)
        period = _cycle_period(steps, tol)
        if period:
            members = steps[-period:]
            log.debug("threshold iteration cycles through chains %s", [m.chain for m in members])
            keep = None
            if blend and period == 2 and members[0].partition.critical != members[1].partition.critical:
                keep = _blend(scenario, e, q, *members)
            if keep is None:
                keep = min(members, key=lambda s: (s.horizons, s.chain))
            return _finish(keep, it, trace, True, e, validity_floor)
        mu = step.mu if it < RELAX_AFTER else 0.5 * (mu0 + step.mu)
    raise ConvergenceError(f"thresholds did not settle after {max_iter} iterations", trace)


def _settle(scenario, i, e, q, tol, max_iter):
    """Fixed point for a known critical node, iterated from zero thresholds.

    Returns None if it does not settle or if some surviving node would die
    before ``i`` at the fixed point.  Nodes routed through ``i`` are left out
    of that check so that their energies cannot influence the result.
    """
    mu = np.zeros(scenario.n_nodes)
    w_prev = None
    for it in range(1, max_iter + 1):
        T_i = float(stationary_lifetimes(scenario, mu, e, q).T[i])
        step = thresholds(scenario, i, T_i, e, mu, q, w_hint=w_prev)
        w_prev = step.w
        if np.max(np.abs(step.mu - mu), initial=0.0) <= tol:
            T = stationary_lifetimes(scenario, step.mu, e, q).T.copy()
            T[list(step.partition.disconnected)] = np.inf
            if critical_node(T)[0] != i:
                return None
            return step
        mu = step.mu if it < RELAX_AFTER else 0.5 * (mu + step.mu)
    return None


def _cycle_period(steps, tol):
    """Length of the cycle the iteration has entered, or 0."""
    mu = steps[-1].mu
    for period in range(2, MAX_PERIOD + 1):
        if len(steps) > period and np.max(np.abs(mu - steps[-1 - period].mu), initial=0.0) <= tol:
            return period
    return 0


def _blend(scenario, e, q, first, second, tol=1e-12):
    """Mix two alternating states so that both critical nodes deplete together.

    Under ``first.mu`` the critical node of ``second`` dies sooner and vice
    versa, so the lifetime gap changes sign along the segment between the
    two threshold vectors; bisection finds the mix where it vanishes.
    Returns None when either lifetime is infinite.
    """
    i, k = first.partition.critical, second.partition.critical

    def gap(theta):
        mu = theta * first.mu + (1.0 - theta) * second.mu
        T = stationary_lifetimes(scenario, mu, e, q).T
        return T[i] - T[k]

    lo, hi = 0.0, 1.0
    g_lo, g_hi = gap(lo), gap(hi)
    if not (np.isfinite(g_lo) and np.isfinite(g_hi)) or g_lo > 0 or g_hi < 0:
        return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    theta = 0.5 * (lo + hi)
    # both critical nodes bind, so report the partition that disconnects less
    # (on a shared route, the one further from the sink)
    nearer = first if theta >= 0.5 else second
    near = min((first, second), key=lambda s: (len(s.partition.disconnected), s is not nearer))
    w = theta * first.w + (1.0 - theta) * second.w
    return _Step(mu=scenario.delta @ w, w=w, partition=near.partition, chain=near.chain, horizons=near.horizons)


def _finish(step, iterations, trace, oscillating, e, floor):
    valid = bool(e.size == 0 or np.min(e) >= floor)
    if not valid:
        log.debug("energy %s below the asymptotic validity floor %s", e, floor)
    return AsymptoticSolution(step.mu, step.w, step.partition, step.chain, iterations,
                              tuple(trace), oscillating, valid, step.horizons)


def format_trace(solution):
    """Human-readable iteration log, one line per iteration (1-based nodes)."""
    lines = []
    for s in solution.trace:
        mu = " ".join(f"{m:.10g}" for m in s.mu)
        lines.append(f"iter {s.iteration}: critical={s.critical + 1} T={s.lifetime:.10g} mu=[{mu}]")
    lines.append("chain: " + " ".join(str(k + 1) for k in solution.chain))
    if solution.oscillating:
        lines.append("note: iteration ended in a cycle of states")
    return "\n".join(lines)


def local_thresholds(scenario):
    """Per-node thresholds from each node's own cost, ignoring the rest of the route.

    Node ``j`` is treated as a lone node that senses with cost ``C0[j, j]``
    and pays ``C1[j, j] - C0[j, j]`` extra to transmit its own messages.
    """
    C0, C1 = scenario.costs.C0, scenario.costs.C1
    mu = np.zeros(scenario.n_nodes)
    for j in range(scenario.n_nodes):
        pj = float(scenario.source_probs[j])
        if pj == 0:
            continue
        lone = Scenario(
            RoutingTree.chain(1),
            CostModel([[C0[j, j]]], [[C1[j, j]]]),
            np.array([1.0 - pj, pj]),
            (scenario.importance[j],),
            np.array([scenario.initial_energy[j]]),
        )
        w = solve_w_i(lone, 0)
        mu[j] = (C1[j, j] - C0[j, j]) * w
    return mu

