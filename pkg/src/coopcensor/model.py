"""Network model: routing trees, cost matrices, importance laws and scenarios.

Node indices are 0-based everywhere inside the library; the sink is the
virtual parent ``-1``.  Scenario files and CLI output use the 1-based
convention (sink = 0) and are converted at the I/O boundary.

Cost matrices are indexed ``C[node, source]``: column ``j`` holds the energy
every node spends in an epoch where source ``j`` censors (``C0``) or
transmits (``C1``) its message.  Energies are integers (unit = 1).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ScenarioError

SINK = -1


def _frozen(a, dtype):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------
# importance distributions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceModel:
    """Distribution of message importance for one source.

    Two families are supported: ``exponential`` (parameter ``mean``) and
    ``discrete`` (atoms ``values`` with weights ``probs``).  ``tail`` and
    ``partial_expectation`` accept scalars or arrays.
    """

    kind: str
    mean_: float = 1.0
    values: tuple = ()
    probs: tuple = ()

    def __post_init__(self):
        if self.kind == "exponential":
            if not self.mean_ > 0:
                raise ScenarioError("exponential importance needs a positive mean")
        elif self.kind == "discrete":
            if len(self.values) == 0 or len(self.values) != len(self.probs):
                raise ScenarioError("discrete importance needs matching values/probs")
            if any(q < 0 for q in self.probs) or not math.isclose(sum(self.probs), 1.0, abs_tol=1e-12):
                raise ScenarioError("discrete importance probabilities must be >= 0 and sum to 1")
        else:
            raise ScenarioError(f"unknown importance kind {self.kind!r}")

    @classmethod
    def exponential(cls, mean=1.0):
        return cls("exponential", mean_=float(mean))

    @classmethod
    def discrete(cls, values, probs):
        order = np.argsort(values, kind="stable")
        return cls(
            "discrete",
            values=tuple(float(values[k]) for k in order),
            probs=tuple(float(probs[k]) for k in order),
        )

    @property
    def mean(self):
        if self.kind == "exponential":
            return self.mean_
        return float(np.dot(self.values, self.probs))

    def tail(self, t):
        """P(x >= t)."""
        t = np.asarray(t, dtype=float)
        if self.kind == "exponential":
            out = np.exp(-np.clip(t, 0.0, None) / self.mean_)
        else:
            v = np.asarray(self.values)
            out = (np.asarray(self.probs) * (v >= t[..., None])).sum(axis=-1)
        return out if out.ndim else float(out)

    def partial_expectation(self, t):
        """E{(x - t)^+}."""
        t = np.asarray(t, dtype=float)
        if self.kind == "exponential":
            with np.errstate(over="ignore", invalid="ignore"):
                out = np.where(t >= 0, self.mean_ * np.exp(-np.clip(t, 0.0, None) / self.mean_), self.mean_ - t)
        else:
            v = np.asarray(self.values)
            out = (np.asarray(self.probs) * np.clip(v - t[..., None], 0.0, None)).sum(axis=-1)
        return out if out.ndim else float(out)

    def from_uniform(self, u):
        """Inverse-CDF transform of uniforms in [0, 1)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "exponential":
            return -self.mean_ * np.log1p(-u)
        cum = np.cumsum(self.probs)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, u, side="right")
        return np.asarray(self.values)[np.minimum(idx, len(self.values) - 1)]

    def to_dict(self):
        if self.kind == "exponential":
            return {"kind": "exponential", "params": {"mean": self.mean_}}
        return {"kind": "discrete", "params": {"values": list(self.values), "probs": list(self.probs)}}

    @classmethod
    def from_dict(cls, d):
        kind, params = d["kind"], d.get("params", {})
        if kind == "exponential":
            return cls.exponential(params.get("mean", 1.0))
        if kind == "discrete":
            return cls.discrete(params["values"], params["probs"])
        raise ScenarioError(f"unknown importance kind {kind!r}")


# --------------------------------------------------------------------------
# topology
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RoutingTree:
    """Fixed routes toward a single sink.

    ``parent[i]`` is the next hop of node ``i`` (``-1`` for the sink).
    ``routing_matrix[i, j] == 1`` iff messages sourced at ``j`` traverse
    node ``i`` (the source itself included).
    """

    parent: np.ndarray
    routing_matrix: np.ndarray = field(init=False, repr=False)
    paths: tuple = field(init=False, repr=False)

    def __post_init__(self):
        parent = _frozen(self.parent, np.int64)
        n = parent.size
        if parent.ndim != 1 or n == 0:
            raise ScenarioError("a routing tree needs at least one node")
        if np.any((parent < SINK) | (parent >= n)) or np.any(parent == np.arange(n)):
            raise ScenarioError("parent indices must name another node or the sink")
        paths = []
        for j in range(n):
            path, node = [], j
            while node != SINK:
                if len(path) > n:
                    raise ScenarioError(f"routing loop through node {j}")
                path.append(node)
                node = int(parent[node])
            paths.append(tuple(path))
        T = np.zeros((n, n), dtype=np.int64)
        for j, path in enumerate(paths):
            T[list(path), j] = 1
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "routing_matrix", _frozen(T, np.int64))
        object.__setattr__(self, "paths", tuple(paths))

    @classmethod
    def chain(cls, n):
        return cls(np.r_[np.arange(1, n), SINK])

    @property
    def n_nodes(self):
        return self.parent.size

    @property
    def sink_neighbors(self):
        return tuple(int(i) for i in np.flatnonzero(self.parent == SINK))

    def path(self, j):
        """Nodes from source ``j`` up to the sink neighbour, in hop order."""
        return self.paths[j]

    def descendants(self, i):
        """Nodes whose route to the sink passes through ``i`` (``i`` excluded)."""
        return tuple(int(j) for j in np.flatnonzero(self.routing_matrix[i]) if j != i)

    def restrict(self, nodes):
        """Sub-tree on ``nodes`` (must be closed under taking parents), re-indexed."""
        nodes = list(nodes)
        index = {old: new for new, old in enumerate(nodes)}
        parent = []
        for old in nodes:
            up = int(self.parent[old])
            if up != SINK and up not in index:
                raise ScenarioError(f"node {old} routes through {up}, which is not in the subnetwork")
            parent.append(SINK if up == SINK else index[up])
        return RoutingTree(np.array(parent, dtype=np.int64))


# --------------------------------------------------------------------------
# costs and scenarios
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CostModel:
    """Deterministic per-epoch energy costs.

    ``C0[:, j]`` / ``C1[:, j]``: consumption of every node when a message from
    source ``j`` is censored / transmitted.  ``silent`` is charged in epochs
    where nobody generates a message.  It may be a non-integer expectation in
    derived subnetworks (see ``Scenario.subnetwork``); the exact solver and
    the simulator insist on integers.
    """

    C0: np.ndarray
    C1: np.ndarray
    silent: np.ndarray = None

    def __post_init__(self):
        C0 = np.asarray(self.C0)
        C1 = np.asarray(self.C1)
        n = C0.shape[0]
        if C0.shape != (n, n) or C1.shape != (n, n):
            raise ScenarioError("C0 and C1 must be square and of equal size")
        silent = np.zeros(n, dtype=np.int64) if self.silent is None else np.asarray(self.silent)
        for name, a in (("C0", C0), ("C1", C1), ("silent_cost", silent)):
            if name != "silent_cost" and not np.all(np.equal(np.mod(a, 1), 0)):
                raise ScenarioError(f"{name} must hold integer energies")
            if np.any(a < 0):
                raise ScenarioError(f"{name} must be non-negative")
        if silent.shape != (n,):
            raise ScenarioError("silent cost must have one entry per node")
        if np.any(C1 < C0):
            raise ScenarioError("transmission costs must dominate censoring costs (C1 >= C0)")
        object.__setattr__(self, "C0", _frozen(C0, np.int64))
        object.__setattr__(self, "C1", _frozen(C1, np.int64))
        integral = np.all(np.equal(np.mod(silent, 1), 0))
        object.__setattr__(self, "silent", _frozen(silent, np.int64 if integral else float))

    @property
    def n_nodes(self):
        return self.C0.shape[0]

    @property
    def integral(self):
        return self.silent.dtype.kind == "i"

    @property
    def delta(self):
        """Incremental cost of transmitting, indexed ``[source, node]``."""
        return self.C1.T - self.C0.T


@dataclass(frozen=True, eq=False)
class Scenario:
    """Complete network model.

    ``p`` has ``N + 1`` entries: ``p[0]`` is the probability of a silent
    epoch and ``p[j + 1]`` the probability that node ``j`` is the source.
    ``importance`` holds one model per source.
    """

    tree: RoutingTree
    costs: CostModel
    p: np.ndarray
    importance: tuple
    initial_energy: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        n = self.tree.n_nodes
        if self.costs.n_nodes != n:
            raise ScenarioError("cost matrices do not match the tree size")
        p = np.asarray(self.p, dtype=float)
        if p.shape != (n + 1,):
            raise ScenarioError(f"p must have {n + 1} entries (silent epoch first)")
        if np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise ScenarioError("source probabilities must be non-negative and sum to 1")
        imp = self.importance
        if isinstance(imp, ImportanceModel):
            imp = (imp,) * n
        imp = tuple(imp)
        if len(imp) != n:
            raise ScenarioError("need one importance model per source")
        e0 = np.asarray(self.initial_energy)
        if e0.shape != (n,) or np.any(e0 < 0) or not np.all(np.equal(np.mod(e0, 1), 0)):
            raise ScenarioError("initial energies must be N non-negative integers")
        object.__setattr__(self, "p", _frozen(p, float))
        object.__setattr__(self, "importance", imp)
        object.__setattr__(self, "initial_energy", _frozen(e0, np.int64))

    # -- derived quantities -------------------------------------------------

    @property
    def n_nodes(self):
        return self.tree.n_nodes

    @property
    def p_silent(self):
        return float(self.p[0])

    @property
    def source_probs(self):
        return self.p[1:]

    @cached_property
    def delta(self):
        return self.costs.delta

    @cached_property
    def c_bar(self):
        """Expected per-epoch consumption when every message is censored."""
        out = self.costs.C0 @ self.source_probs + self.costs.silent * self.p_silent
        out.setflags(write=False)
        return out

    @cached_property
    def shared_importance(self):
        first = self.importance[0]
        return first if all(m == first for m in self.importance[1:]) else None

    def tail(self, t):
        """Per-source P(x_j >= t_j) for a vector of thresholds."""
        t = np.asarray(t, dtype=float)
        shared = self.shared_importance
        if shared is not None:
            return np.asarray(shared.tail(t), dtype=float)
        return np.array([m.tail(tj) for m, tj in zip(self.importance, t)])

    def partial_expectation(self, t):
        """Per-source E{(x_j - t_j)^+} for a vector of thresholds."""
        t = np.asarray(t, dtype=float)
        shared = self.shared_importance
        if shared is not None:
            return np.asarray(shared.partial_expectation(t), dtype=float)
        return np.array([m.partial_expectation(tj) for m, tj in zip(self.importance, t)])

    def path_feasible(self, e, j):
        """Success predicate: every hop of source ``j`` can pay its transmit cost."""
        path = list(self.tree.path(j))
        return bool(np.all(np.asarray(e)[path] >= self.costs.C1[path, j]))

    # -- transformations ----------------------------------------------------

    def with_energy(self, e):
        return Scenario(self.tree, self.costs, self.p, self.importance, np.asarray(e, dtype=np.int64), self.seed)

    def subnetwork(self, nodes, energy=None):
        """Scenario restricted to ``nodes``; dropped sources become silent epochs.

        The retained sources keep their probabilities and the silent
        probability absorbs the rest.  Silent epochs of the subnetwork are
        charged the expected censoring cost, at the retained nodes, of the
        events they replace (true silent epochs and messages of dropped
        sources).  ``energy`` (if given) is the energy of the retained nodes
        and may be real-valued; it is rounded down.
        """
        nodes = sorted(int(k) for k in nodes)
        if not nodes:
            raise ScenarioError("empty subnetwork")
        tree = self.tree.restrict(nodes)
        idx = np.array(nodes)
        dropped = np.setdiff1d(np.arange(self.n_nodes), idx)
        p_kept = self.source_probs[idx]
        p0 = max(0.0, 1.0 - p_kept.sum())
        silent = self.costs.silent[idx]
        if p0 > 0:
            folded = self.p_silent * silent + self.costs.C0[np.ix_(idx, dropped)] @ self.source_probs[dropped]
            silent = folded / p0
            if np.allclose(silent, np.round(silent), rtol=0, atol=1e-12):
                silent = np.round(silent).astype(np.int64)
        costs = CostModel(
            self.costs.C0[np.ix_(idx, idx)],
            self.costs.C1[np.ix_(idx, idx)],
            silent,
        )
        p = np.r_[p0, p_kept]
        e = self.initial_energy[idx] if energy is None else np.floor(np.clip(energy, 0, None)).astype(np.int64)
        return Scenario(tree, costs, p, tuple(self.importance[k] for k in nodes), e, self.seed)

    # -- serialization --------------------------------------------------------

    def to_dict(self):
        shared = self.shared_importance
        return {
            "nodes": self.n_nodes,
            "parent": [int(q) + 1 for q in self.tree.parent],
            "C0": self.costs.C0.tolist(),
            "C1": self.costs.C1.tolist(),
            "silent_cost": self.costs.silent.tolist(),
            "p": [float(q) for q in self.p],
            "importance": shared.to_dict() if shared is not None else [m.to_dict() for m in self.importance],
            "initial_energy": self.initial_energy.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            n = int(d["nodes"])
            parent = np.asarray(d["parent"], dtype=np.int64) - 1
            if parent.shape != (n,):
                raise ScenarioError("parent[] must list one next hop per node")
            imp = d["importance"]
            importance = (
                ImportanceModel.from_dict(imp) if isinstance(imp, dict) else tuple(ImportanceModel.from_dict(m) for m in imp)
            )
            costs = CostModel(np.asarray(d["C0"]), np.asarray(d["C1"]), d.get("silent_cost"))
            return cls(RoutingTree(parent), costs, np.asarray(d["p"], dtype=float), importance,
                       np.asarray(d["initial_energy"]), d.get("seed"))
        except KeyError as exc:
            raise ScenarioError(f"scenario file lacks field {exc.args[0]!r}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read scenario file {path}: {exc}") from None
        return cls.from_dict(data)


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def _check_energies(**kw):
    for name, value in kw.items():
        if value < 0:
            raise ScenarioError(f"{name} must be non-negative, got {value}")


def routed_costs(tree, E_S, E_R, E_T):
    """Sense/receive/transmit cost matrices for fixed routes.

    Censoring costs only the sensing energy at the source.  Transmitting
    adds, for every node on the route, its transmit energy and (for relays)
    the receive energy.  ``E_T`` may be a per-node vector.
    """
    n = tree.n_nodes
    T = tree.routing_matrix
    eye = np.eye(n, dtype=np.int64)
    E_T = np.broadcast_to(np.asarray(E_T, dtype=np.int64), (n,))
    C0 = E_S * eye
    C1 = C0 + E_R * T * (1 - eye) + E_T[:, None] * T
    return CostModel(C0, C1)


def build_line_scenario(n=10, E_S=1, E_R=5, E_T=5, battery=10000, importance=None):
    """Chain ``0 -> 1 -> ... -> n-1 -> sink`` with uniform sources."""
    if n < 1:
        raise ScenarioError("a line needs at least one node")
    _check_energies(E_S=E_S, E_R=E_R, E_T=E_T, battery=battery)
    tree = RoutingTree.chain(n)
    p = np.r_[0.0, np.full(n, 1.0 / n)]
    return Scenario(tree, routed_costs(tree, E_S, E_R, E_T), p,
                    importance or ImportanceModel.exponential(1.0), np.full(n, battery, dtype=np.int64))


def build_random_tree_scenario(n=50, seed=0, E_S=1, E_R=5, E_T_range=(5, 20), battery=10000, importance=None):
    """Random tree: node ``i`` attaches to a uniformly chosen ``j > i`` (``j = n`` is the sink).

    Draw order for a given ``seed``: the ``n`` parent choices in node order,
    then one integer transmit energy per node from ``E_T_range`` (inclusive).
    """
    if n < 1:
        raise ScenarioError("a tree needs at least one node")
    lo, hi = E_T_range
    if lo > hi or int(lo) != lo or int(hi) != hi:
        raise ScenarioError("E_T_range must be a non-empty integer interval")
    _check_energies(E_S=E_S, E_R=E_R, E_T_low=lo, battery=battery)
    rng = np.random.default_rng(seed)
    parent = np.array([rng.integers(i + 1, n + 1) for i in range(n)], dtype=np.int64)
    parent[parent == n] = SINK
    E_T = rng.integers(int(lo), int(hi) + 1, size=n)
    tree = RoutingTree(parent)
    p = np.r_[0.0, np.full(n, 1.0 / n)]
    return Scenario(tree, routed_costs(tree, E_S, E_R, E_T), p,
                    importance or ImportanceModel.exponential(1.0), np.full(n, battery, dtype=np.int64), seed)


def build_pair_scenario(battery=(1000, 1000)):
    """Two-node line with the asymmetric costs used for the threshold-surface study.

    c0(1) = (3, 1), c0(2) = (1, 3), c1(1) = (11, 10), c1(2) = (1, 10);
    equiprobable sources, exponential(1) importance.
    """
    C0 = np.array([[3, 1], [1, 3]])
    C1 = np.array([[11, 1], [10, 10]])
    return Scenario(RoutingTree.chain(2), CostModel(C0, C1), np.array([0.0, 0.5, 0.5]),
                    ImportanceModel.exponential(1.0), np.asarray(battery, dtype=np.int64))


def build_single_node_scenario(c0=1, c1=2, battery=500, importance=None, p_message=1.0):
    _check_energies(c0=c0, c1=c1, battery=battery)
    return Scenario(RoutingTree.chain(1), CostModel([[c0]], [[c1]]), np.array([1.0 - p_message, p_message]),
                    importance or ImportanceModel.exponential(1.0), np.array([battery]))

