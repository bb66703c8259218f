"""Exact optimal censoring thresholds by backward recursion over the energy lattice.

With deterministic costs and path-feasibility success, the value function
obeys

    lambda(e) = sum_j p_j [ lambda((e - c0(j))^+) + h_j(mu(e, j)) Q(e, j) ]
    mu(e, j)  = lambda((e - c0(j))^+) - lambda((e - c1(j))^+)

where ``h_j(t) = E{(x - t)^+ | y = j}`` and ``Q(e, j)`` is 1 iff every node
on the route of ``j`` holds at least its transmit cost.  Every successor
``(e - c)^+`` is component-wise below ``e``, hence earlier in C (row-major)
order, so one pass over the flattened lattice solves the recursion.  A
successor equal to ``e`` itself (zero cost in every non-empty coordinate)
makes the state equation implicit but linear; it is solved in place.

The lattice grows as the product of the per-node caps, so this is only
usable for a handful of nodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numba as nb
import numpy as np

from ._numeric import excess, importance_arrays
from .errors import BudgetExceededError, DegenerateScenarioError, ScenarioError, SliceError
from .model import Scenario

DEFAULT_CELL_BUDGET = 40_000_000


@nb.njit(cache=True)
def _shift_index(e, cost, strides):
    idx = 0
    for i in range(e.size):
        d = e[i] - cost[i]
        if d > 0:
            idx += d * strides[i]
    return idx


@nb.njit(cache=True)
def _backward_recursion(dims, strides, c0, c1, silent, p, on_path, kinds, means, vals, probs, lam, mu):
    """Fill ``lam`` (flat) and ``mu`` (source x flat); return -1 or the first bad cell."""
    n = dims.size
    n_src = c0.shape[0]
    total = lam.size
    e = np.zeros(n, dtype=np.int64)
    t0 = np.zeros(n_src, dtype=np.int64)
    t1 = np.zeros(n_src, dtype=np.int64)
    for idx in range(total):
        acc = 0.0
        self_weight = 0.0
        # silent epoch: c0 = c1 = silent, no reward
        ts = _shift_index(e, silent, strides)
        if ts == idx:
            self_weight += p[0]
        else:
            acc += p[0] * lam[ts]
        for j in range(n_src):
            t0[j] = _shift_index(e, c0[j], strides)
            t1[j] = _shift_index(e, c1[j], strides)
            ok = True
            for i in range(n):
                if on_path[j, i] and e[i] < c1[j, i]:
                    ok = False
                    break
            pj = p[j + 1]
            if t0[j] == idx:
                if ok and pj > 0.0:
                    return idx
                self_weight += pj
            else:
                m = lam[t0[j]] - lam[t1[j]]
                mu[j, idx] = m
                acc += pj * lam[t0[j]]
                if ok:
                    acc += pj * excess(kinds[j], means[j], vals[j], probs[j], m)
        if self_weight >= 1.0 - 1e-15:
            # every draw leaves the state unchanged and no reward is reachable
            lam[idx] = 0.0
        else:
            lam[idx] = acc / (1.0 - self_weight)
        # extra energy never hurts, so lam(e) >= lam(e - u_i) holds exactly;
        # this only removes last-bit rounding drops in flat directions
        for i in range(n):
            if e[i] > 0 and lam[idx - strides[i]] > lam[idx]:
                lam[idx] = lam[idx - strides[i]]
        for j in range(n_src):
            if t0[j] == idx:
                mu[j, idx] = lam[idx] - lam[t1[j]]
        # odometer increment, last coordinate fastest
        for i in range(n - 1, -1, -1):
            e[i] += 1
            if e[i] < dims[i]:
                break
            e[i] = 0
    return -1


def _caps(scenario, e_max):
    caps = np.broadcast_to(np.asarray(e_max, dtype=np.int64), (scenario.n_nodes,)).copy()
    if np.any(caps < 0):
        raise ValueError("energy caps must be non-negative")
    return caps


@dataclass(frozen=True, eq=False)
class ExactSolution:
    """Value table ``lam[e]`` and threshold table ``mu[j][e]`` on the lattice ``0..e_max``."""

    scenario: Scenario
    e_max: np.ndarray
    lam: np.ndarray
    mu: np.ndarray

    def value(self, e):
        return float(self.lam[tuple(np.atleast_1d(np.asarray(e, dtype=np.int64)))])

    def threshold(self, e, j):
        return float(self.mu[(j,) + tuple(np.atleast_1d(np.asarray(e, dtype=np.int64)))])

    def success(self, e, j):
        return 1.0 if self.scenario.path_feasible(e, j) else 0.0


def solve_exact(scenario, e_max, budget=DEFAULT_CELL_BUDGET):
    """Solve the recursion for every energy vector with ``0 <= e_i <= e_max_i``.

    Raises
    ------
    BudgetExceededError
        If the lattice has more than ``budget`` cells.
    DegenerateScenarioError
        If some state can transmit a message for free (a source whose
        censoring cost is zero in every non-empty coordinate while its route
        is feasible), which makes the undiscounted reward unbounded.
    """
    if not scenario.costs.integral:
        raise ScenarioError("the energy lattice needs integer silent costs")
    caps = _caps(scenario, e_max)
    dims = caps + 1
    cells = int(np.prod(dims, dtype=object))
    if cells > budget:
        raise BudgetExceededError(cells, budget)
    strides = np.ones_like(dims)
    for i in range(dims.size - 2, -1, -1):
        strides[i] = strides[i + 1] * dims[i + 1]
    c0 = np.ascontiguousarray(scenario.costs.C0.T)
    c1 = np.ascontiguousarray(scenario.costs.C1.T)
    on_path = np.ascontiguousarray(scenario.tree.routing_matrix.T.astype(np.bool_))
    lam = np.zeros(cells)
    mu = np.zeros((scenario.n_nodes, cells))
    bad = _backward_recursion(dims, strides, c0, c1, scenario.costs.silent.copy(), scenario.p.copy(),
                              on_path, *importance_arrays(tuple(scenario.importance)), lam, mu)
    if bad >= 0:
        state = np.unravel_index(bad, tuple(dims))
        raise DegenerateScenarioError(f"free transmission at energy {tuple(int(s) for s in state)}: reward is unbounded")
    shape = tuple(int(d) for d in dims)
    lam = lam.reshape(shape)
    mu = mu.reshape((scenario.n_nodes,) + shape)
    lam.setflags(write=False)
    mu.setflags(write=False)
    return ExactSolution(scenario, caps, lam, mu)


def decide(mu, q, x):
    """Transmit (1) iff ``q * x >= mu``; ties transmit."""
    return int(q * x >= mu)


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------


def _shifted(table, grids, cost):
    idx = tuple(np.clip(g - c, 0, None) for g, c in zip(grids, cost))
    return table[idx]


def bellman_residual(solution):
    """Largest violation of the optimality equation over the whole lattice.

    For each state and source the optimal expected continuation is
    ``E_x max(lambda(e - c0), Q x + lambda(e - c1))``, evaluated here in
    closed form from the two-action maximum, vectorized over the lattice.
    """
    sc = solution.scenario
    lam = solution.lam
    grids = np.indices(lam.shape, sparse=True)
    C0, C1 = sc.costs.C0, sc.costs.C1
    rhs = sc.p_silent * _shifted(lam, grids, sc.costs.silent)
    for j in range(sc.n_nodes):
        keep = _shifted(lam, grids, C0[:, j])
        send = _shifted(lam, grids, C1[:, j])
        path = sc.tree.path(j)
        q = np.ones(lam.shape, dtype=bool)
        for i in path:
            q = q & (grids[i] >= C1[i, j])
        gap = keep - send
        # E max(gap, x) - gap == E (x - gap)^+ ; with q = 0 the send branch pays nothing
        best = np.where(q, send + gap + sc.importance[j].partial_expectation(gap), np.maximum(keep, send))
        rhs = rhs + sc.source_probs[j] * best
    return float(np.max(np.abs(rhs - lam)))


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------


def lattice_slice(table, axes):
    """Cut a 1-D or 2-D section out of a lattice table.

    ``axes`` has one entry per energy coordinate: an ``int`` pins that
    coordinate, a ``slice`` or ``range`` keeps it.  Returns
    ``(coords, values)`` where ``coords`` lists the kept coordinate values.
    """
    table = np.asarray(table)
    if len(axes) != table.ndim:
        raise SliceError(f"expected {table.ndim} axis specs, got {len(axes)}")
    index, coords = [], []
    for a, size in zip(axes, table.shape):
        if isinstance(a, (int, np.integer)):
            if not 0 <= a < size:
                raise SliceError(f"energy {a} outside 0..{size - 1}")
            index.append(int(a))
            continue
        r = range(size)[a] if isinstance(a, slice) else a
        if len(r) == 0:
            raise SliceError("empty slice request")
        if min(r) < 0 or max(r) >= size:
            raise SliceError(f"range {r} outside 0..{size - 1}")
        index.append(np.asarray(r))
        coords.append(np.asarray(r))
    if not 1 <= len(coords) <= 2:
        raise SliceError("a slice must keep one or two energy coordinates")
    return coords, table[np.ix_(*[np.atleast_1d(k) for k in index])].reshape([c.size for c in coords])


def _lattice_rows(shape):
    return np.indices(shape).reshape(len(shape), -1).T


def write_value_csv(solution, path, preamble=()):
    n = solution.scenario.n_nodes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in preamble:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"e_{i + 1}" for i in range(n)] + ["lambda"])
        for e, v in zip(_lattice_rows(solution.lam.shape), solution.lam.ravel()):
            w.writerow([*e.tolist(), repr(float(v))])
    return path


def write_threshold_csv(solution, path, preamble=()):
    n = solution.scenario.n_nodes
    rows = _lattice_rows(solution.lam.shape)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in preamble:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"e_{i + 1}" for i in range(n)] + ["source", "mu"])
        for j in range(n):
            for e, v in zip(rows, solution.mu[j].ravel()):
                w.writerow([*e.tolist(), j + 1, repr(float(v))])
    return path
