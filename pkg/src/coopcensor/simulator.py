"""Epoch-driven Monte Carlo simulation of a censoring network.

One epoch: draw the source (or a silent epoch), draw the importance, let
the strategy decide, charge energies with the clamped update
``e <- (e - cost)^+`` and book the reward of successful deliveries.

Random numbers come from two Philox (counter-based) streams per run, both
keyed by the run seed: stream 0 gives the source uniform and stream 1 the
importance uniform, exactly one of each per epoch.  The draws of epoch
``k`` are therefore the ``k``-th elements of those streams, independent of
how the run is chunked or scheduled.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np
from scipy import stats

from . import asymptotic
from .errors import ScenarioError

CHUNK = 8192
NO_LIMIT = 2**62

_BOUNDARY, _DEATH, _TERMINATED, _CRITICAL = 0, 1, 2, 3
# counter slots
_EPOCH, _GEN, _RECV, _DISC, _LOST, _CHARGED = range(6)


# --------------------------------------------------------------------------
# seeds and streams
# --------------------------------------------------------------------------


def derive_seed(base_seed, index, purpose=0):
    """Independent 63-bit seed for item ``index`` (purpose 0: runs, 1: topologies)."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(purpose), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


class RunStreams:
    """Per-epoch uniforms of one run, served in fixed-size chunks."""

    def __init__(self, seed, models):
        self.seed = int(seed)
        self.models = tuple(models)
        self._src = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(0,))))
        self._imp = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(1,))))
        self.base = -CHUNK
        self.U = self.X = None

    def load(self, epoch):
        """Make the chunk holding ``epoch`` current (chunks are read in order)."""
        while self.base + CHUNK <= epoch:
            self.base += CHUNK
            self.U = self._src.random(CHUNK)
            v = self._imp.random(CHUNK)
            self.X = np.stack([np.asarray(m.from_uniform(v), dtype=float) for m in self.models])

    def draw(self, epoch):
        self.load(epoch)
        k = epoch - self.base
        return float(self.U[k]), self.X[:, k]


# --------------------------------------------------------------------------
# strategies
# --------------------------------------------------------------------------


class Strategy:
    """Maps the network state to one threshold per source; transmit iff ``x >= mu``.

    ``thresholds`` receives the scenario, the current energies and the mask
    of nodes still connected to the sink, and returns ``(mu, g)`` where
    ``g`` (or None) is the expected consumption used to watch for a change
    of critical node.  ``previous`` holds the thresholds in force so far
    (None on the first call).
    """

    name = "strategy"
    refresh_every = None
    watch_critical = False

    def thresholds(self, scenario, e, connected, previous=None):
        raise NotImplementedError

    def __repr__(self):
        return self.name


class NonSelective(Strategy):
    name = "NS"

    def thresholds(self, scenario, e, connected, previous=None):
        return np.full(scenario.n_nodes, -np.inf), None


class FixedThreshold(Strategy):
    name = "FIXED"

    def __init__(self, mu):
        self.mu = np.asarray(mu, dtype=float)

    def thresholds(self, scenario, e, connected, previous=None):
        return np.broadcast_to(self.mu, (scenario.n_nodes,)).copy(), None


class LocalThreshold(Strategy):
    """Each node censors with the threshold it would use if it were alone."""

    name = "ST"

    def thresholds(self, scenario, e, connected, previous=None):
        return asymptotic.local_thresholds(scenario), None


class GlobalCooperative(Strategy):
    """Network-wide constant thresholds from the critical-node recursion.

    Recomputed on the live subnetwork after every node death, whenever the
    critical node implied by the current energies changes, and every
    ``refresh_every`` epochs.
    """

    name = "GCT"
    watch_critical = True

    def __init__(self, refresh_every=500, warm_start=True):
        self.refresh_every = refresh_every
        self.warm_start = warm_start

    def thresholds(self, scenario, e, connected, previous=None):
        n = scenario.n_nodes
        nodes = np.flatnonzero(connected)
        mu = np.full(n, np.inf)
        g = np.zeros(n)
        if nodes.size == 0:
            return mu, g
        sub = scenario.subnetwork(nodes)
        start = None
        if self.warm_start and previous is not None and np.all(np.isfinite(previous[nodes])):
            start = previous[nodes]
        sol = asymptotic.main(sub, np.asarray(e)[nodes].astype(float), initial_mu=start, canonical=start is None)
        mu[nodes] = sol.mu
        g[nodes] = asymptotic.expected_consumption(sub, sol.mu)
        return mu, g


STRATEGIES = {
    "NS": NonSelective,
    "ST": LocalThreshold,
    "LOCAL": LocalThreshold,
    "GCT": GlobalCooperative,
}


def strategy_from_name(name):
    try:
        return STRATEGIES[name.upper()]()
    except KeyError:
        raise ScenarioError(f"unknown strategy {name!r}; choose from {sorted(set(STRATEGIES))}") from None


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass
class SimState:
    e: np.ndarray
    death: np.ndarray  # epoch at which each node ran dry, -1 while alive
    counters: np.ndarray = field(default_factory=lambda: np.zeros(6, dtype=np.int64))
    reward: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @classmethod
    def initial(cls, scenario):
        e = scenario.initial_energy.astype(np.int64).copy()
        death = np.where(e == 0, 0, -1).astype(np.int64)
        return cls(e, death)

    def copy(self):
        return SimState(self.e.copy(), self.death.copy(), self.counters.copy(), self.reward.copy())

    @property
    def epoch(self):
        return int(self.counters[_EPOCH])

    @property
    def alive(self):
        return self.e > 0


@dataclass(frozen=True, eq=False)
class Refresh:
    """One threshold update: enough to replay the strategy call exactly."""

    epoch: int
    energy: np.ndarray
    connected: np.ndarray
    previous: np.ndarray | None
    mu: np.ndarray


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    source: int  # -1 for a silent epoch
    importance: float
    action: int
    success: int
    charged: int


@dataclass(frozen=True)
class SimMetrics:
    strategy: str
    seed: int
    importance_sum: float
    generated: int
    received: int
    discarded: int
    lost: int
    lifetime_epochs: int
    node_death_epochs: tuple
    energy_charged: int
    run: int = 0
    refreshes: tuple = field(default=(), repr=False, compare=False)

    def row(self):
        deaths = ["" if d < 0 else d for d in self.node_death_epochs]
        return [self.run, self.seed, self.strategy, repr(self.importance_sum), self.generated,
                self.received, self.discarded, self.lifetime_epochs, *deaths]


def connected_mask(scenario, e):
    """Nodes with energy whose whole route to the sink still has energy."""
    alive = np.asarray(e) > 0
    T = scenario.tree.routing_matrix
    # node j is connected iff no dead node lies on its path
    return alive & ~((T * ~alive[:, None]).any(axis=0))


def _source_cdf(scenario, connected):
    p = np.where(connected, scenario.source_probs, 0.0)
    cum = np.cumsum(np.r_[1.0 - p.sum(), p])
    cum[-1] = 1.0
    return cum


class _Tables:
    """Padded per-source charge lists, in the order nodes are charged."""

    def __init__(self, scenario):
        n = scenario.n_nodes
        C0, C1 = scenario.costs.C0, scenario.costs.C1
        if not scenario.costs.integral:
            raise ScenarioError("the simulator needs integer silent costs")
        self.tx_nodes = np.full((n, n), -1, dtype=np.int64)
        self.tx_cost = np.zeros((n, n), dtype=np.int64)
        self.tx_len = np.zeros(n, dtype=np.int64)
        self.path_len = np.zeros(n, dtype=np.int64)
        self.cz_nodes = np.full((n, n), -1, dtype=np.int64)
        self.cz_cost = np.zeros((n, n), dtype=np.int64)
        self.cz_len = np.zeros(n, dtype=np.int64)
        for j in range(n):
            path = list(scenario.tree.path(j))
            off = [i for i in range(n) if i not in path and C1[i, j] > 0]
            order = path + off
            self.tx_nodes[j, : len(order)] = order
            self.tx_cost[j, : len(order)] = C1[order, j]
            self.tx_len[j] = len(order)
            self.path_len[j] = len(path)
            cz = [i for i in range(n) if C0[i, j] > 0]
            self.cz_nodes[j, : len(cz)] = cz
            self.cz_cost[j, : len(cz)] = C0[cz, j]
            self.cz_len[j] = len(cz)
        silent = scenario.costs.silent
        self.silent_nodes = np.flatnonzero(silent > 0).astype(np.int64)
        self.silent_cost = silent[self.silent_nodes].astype(np.int64)
        self.sink_nb = np.array(scenario.tree.sink_neighbors, dtype=np.int64)
        self.models = tuple(dict.fromkeys(scenario.importance))
        self.model_of = np.array([self.models.index(m) for m in scenario.importance], dtype=np.int64)


# --------------------------------------------------------------------------
# one epoch, reference implementation
# --------------------------------------------------------------------------


def _pick_source(u, cum):
    if u < cum[0]:
        return -1
    for j in range(1, cum.size):
        if u < cum[j]:
            return j - 1
    return cum.size - 2


def _charge(state, i, cost):
    paid = min(int(state.e[i]), int(cost))
    state.e[i] -= paid
    return paid


def _step(state, tab, cum, mu, u, x_models):
    """Advance ``state`` by one epoch in place; return the epoch record."""
    k = state.epoch
    before = state.e > 0
    y = _pick_source(u, cum)
    x, a, q, charged = 0.0, 0, 0, 0
    if y < 0:
        for i, c in zip(tab.silent_nodes, tab.silent_cost):
            charged += _charge(state, i, c)
    else:
        x = float(x_models[tab.model_of[y]])
        state.counters[_GEN] += 1
        a = int(x >= mu[y])
        if a:
            q = 1
            for pos in range(tab.tx_len[y]):
                i, c = tab.tx_nodes[y, pos], tab.tx_cost[y, pos]
                if pos < tab.path_len[y]:
                    if q == 0:
                        continue
                    if state.e[i] < c:
                        q = 0
                charged += _charge(state, i, c)
            if q:
                state.counters[_RECV] += 1
                state.reward[0] += x
            else:
                state.counters[_LOST] += 1
        else:
            state.counters[_DISC] += 1
            for pos in range(tab.cz_len[y]):
                charged += _charge(state, tab.cz_nodes[y, pos], tab.cz_cost[y, pos])
    state.counters[_CHARGED] += charged
    state.counters[_EPOCH] += 1
    state.death[before & (state.e == 0)] = k + 1
    return EpochRecord(k, y, x, a, q, charged)


def run_epoch(state, scenario, mu, streams, tables=None):
    """One epoch under thresholds ``mu``; returns ``(new_state, record)``.

    A transmission succeeds only if every node on the route can pay its
    transmit cost.  On failure the route is charged up to and including the
    first node that cannot pay (clamped at zero); nodes further up pay
    nothing.  Off-route nodes with a transmit cost pay it on every attempt.
    Sources that are dead or cut off from the sink never fire; their
    probability goes to silent epochs.
    """
    tab = tables or _Tables(scenario)
    new = state.copy()
    cum = _source_cdf(scenario, connected_mask(scenario, state.e))
    u, xs = streams.draw(state.epoch)
    rec = _step(new, tab, cum, np.asarray(mu, dtype=float), u, xs)
    return new, rec


def _python_advance(state, tab, cum, mu, streams, g, watch, critical, stop_epoch):
    while state.epoch < stop_epoch:
        u, xs = streams.draw(state.epoch)
        before = state.e > 0
        _step(state, tab, cum, mu, u, xs)
        if np.all(state.e[tab.sink_nb] == 0):
            return _TERMINATED
        if np.any(before & (state.e == 0)):
            return _DEATH
        if critical >= 0 and _watch_argmin(state.e, g, watch) != critical:
            return _CRITICAL
    return _BOUNDARY


# --------------------------------------------------------------------------
# compiled epoch loop (same semantics as _step)
# --------------------------------------------------------------------------


@nb.njit(cache=True)
def _watch_argmin(e, g, watch):
    best, best_t = -1, np.inf
    for i in range(e.size):
        if watch[i] and g[i] > 0.0:
            t = e[i] / g[i]
            if t < best_t:
                best, best_t = i, t
    return best


@nb.njit(cache=True)
def _kernel(e, death, counters, reward, cum, mu, U, X, model_of, base,
            tx_nodes, tx_cost, tx_len, path_len, cz_nodes, cz_cost, cz_len,
            silent_nodes, silent_cost, sink_nb, g, watch, critical, stop_epoch):
    n = e.size
    n_cum = cum.size
    while counters[0] < stop_epoch:
        k = counters[0]
        u = U[k - base]
        y = -1
        if u >= cum[0]:
            y = n_cum - 2
            for j in range(1, n_cum):
                if u < cum[j]:
                    y = j - 1
                    break
        died = False
        charged = 0
        if y < 0:
            for s in range(silent_nodes.size):
                i = silent_nodes[s]
                paid = min(e[i], silent_cost[s])
                e[i] -= paid
                charged += paid
        else:
            x = X[model_of[y], k - base]
            counters[1] += 1
            if x >= mu[y]:
                q = 1
                for pos in range(tx_len[y]):
                    i = tx_nodes[y, pos]
                    c = tx_cost[y, pos]
                    if pos < path_len[y]:
                        if q == 0:
                            continue
                        if e[i] < c:
                            q = 0
                    paid = min(e[i], c)
                    e[i] -= paid
                    charged += paid
                if q == 1:
                    counters[2] += 1
                    reward[0] += x
                else:
                    counters[4] += 1
            else:
                counters[3] += 1
                for pos in range(cz_len[y]):
                    i = cz_nodes[y, pos]
                    paid = min(e[i], cz_cost[y, pos])
                    e[i] -= paid
                    charged += paid
        counters[5] += charged
        counters[0] += 1
        if charged > 0:
            for i in range(n):
                if e[i] == 0 and death[i] < 0:
                    death[i] = k + 1
                    died = True
        done = True
        for s in range(sink_nb.size):
            if e[sink_nb[s]] > 0:
                done = False
                break
        if done:
            return 2
        if died:
            return 1
        if critical >= 0 and _watch_argmin(e, g, watch) != critical:
            return 3
    return 0


def _kernel_advance(state, tab, cum, mu, streams, g, watch, critical, stop_epoch):
    streams.load(state.epoch)
    stop = min(stop_epoch, streams.base + CHUNK)
    status = _kernel(state.e, state.death, state.counters, state.reward, cum, mu, streams.U, streams.X,
                     tab.model_of, streams.base, tab.tx_nodes, tab.tx_cost, tab.tx_len, tab.path_len,
                     tab.cz_nodes, tab.cz_cost, tab.cz_len, tab.silent_nodes, tab.silent_cost, tab.sink_nb,
                     g, watch, critical, stop)
    return status


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------


def simulate(scenario, strategy, seed=0, max_epochs=None, engine="numba", record_refreshes=False, run=0):
    """Run the network until every sink neighbour is dry (or ``max_epochs``)."""
    if isinstance(strategy, str):
        strategy = strategy_from_name(strategy)
    tab = _Tables(scenario)
    streams = RunStreams(seed, tab.models)
    state = SimState.initial(scenario)
    advance = _kernel_advance if engine == "numba" else _python_advance
    limit = NO_LIMIT if max_epochs is None else int(max_epochs)
    refreshes = []
    n = scenario.n_nodes
    stale = True
    mu = g = None
    watch = np.zeros(n, dtype=np.bool_)
    critical = -1
    next_refresh = NO_LIMIT
    while state.epoch < limit:
        if np.all(state.e[tab.sink_nb] == 0):
            break
        connected = connected_mask(scenario, state.e)
        if not np.any(connected & (scenario.source_probs > 0)):
            break
        if stale:
            previous = None if mu is None else mu.copy()
            mu, g = strategy.thresholds(scenario, state.e.copy(), connected, previous)
            mu = np.asarray(mu, dtype=float)
            cum = _source_cdf(scenario, connected)
            if record_refreshes:
                refreshes.append(Refresh(state.epoch, state.e.copy(), connected.copy(), previous, mu.copy()))
            if strategy.watch_critical and g is not None:
                watch = connected.copy()
                g = np.asarray(g, dtype=float)
                critical = int(_watch_argmin(state.e, g, watch))
            else:
                g, critical = np.zeros(n), -1
            every = strategy.refresh_every
            next_refresh = state.epoch + every if every else NO_LIMIT
            stale = False
        status = advance(state, tab, cum, mu, streams, g, watch, critical, min(limit, next_refresh))
        if status == _TERMINATED:
            break
        if status in (_DEATH, _CRITICAL) or state.epoch >= next_refresh:
            stale = True
    return SimMetrics(
        strategy=strategy.name,
        seed=int(seed),
        importance_sum=float(state.reward[0]),
        generated=int(state.counters[_GEN]),
        received=int(state.counters[_RECV]),
        discarded=int(state.counters[_DISC]),
        lost=int(state.counters[_LOST]),
        lifetime_epochs=state.epoch,
        node_death_epochs=tuple(int(d) for d in state.death),
        energy_charged=int(state.counters[_CHARGED]),
        run=run,
        refreshes=tuple(refreshes),
    )


# --------------------------------------------------------------------------
# replications
# --------------------------------------------------------------------------

METRICS = ("importance_sum", "generated", "received", "discarded", "lost", "lifetime_epochs")


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    ci_low: float
    ci_high: float
    n: int

    def overlaps(self, other):
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


def aggregate(values, level=0.95):
    """Mean, sample std and two-sided Student-t confidence interval."""
    v = np.asarray(values, dtype=float)
    n = v.size
    mean = float(v.mean())
    if n < 2:
        return Aggregate(mean, 0.0, mean, mean, n)
    std = float(v.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2, n - 1)) * std / math.sqrt(n)
    return Aggregate(mean, std, mean - half, mean + half, n)


@dataclass(frozen=True)
class ReplicationResult:
    runs: tuple
    summary: dict

    def __getitem__(self, metric):
        return self.summary[metric]


def _one(args):
    scenario, strategy, seed, r, max_epochs = args
    return simulate(scenario, strategy, seed=seed, max_epochs=max_epochs, run=r)


def run_replications(scenario, strategy, n_runs, base_seed=0, workers=1, max_epochs=None):
    """``n_runs`` independent runs; run ``r`` uses ``derive_seed(base_seed, r)``.

    Runs are reduced in replication order, so the summary does not depend
    on how the work was scheduled.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if isinstance(strategy, str):
        strategy = strategy_from_name(strategy)
    jobs = [(scenario, strategy, derive_seed(base_seed, r), r, max_epochs) for r in range(n_runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_one, jobs))
    else:
        runs = [_one(j) for j in jobs]
    runs.sort(key=lambda m: m.run)
    summary = {k: aggregate([getattr(m, k) for m in runs]) for k in METRICS}
    return ReplicationResult(tuple(runs), summary)


def with_run(metrics, run):
    return replace(metrics, run=run)
