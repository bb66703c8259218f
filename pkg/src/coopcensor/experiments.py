"""Experiment descriptions and the commands behind the CLI.

An :class:`ExperimentSpec` fully determines a command's outputs: running the
same spec twice writes byte-identical files.  Every CSV starts with two
``#`` comment lines carrying the spec hash and the base seed, followed by
the header row.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import asymptotic, exact, plotting
from . import simulator as sim
from .errors import ScenarioError
from .model import (
    Scenario,
    build_line_scenario,
    build_pair_scenario,
    build_random_tree_scenario,
    build_single_node_scenario,
)

TASKS = ("solve-exact", "solve-asymptotic", "simulate", "experiment", "lifetime-sweep")
SWEEP_AXES = ("nodes", "E_T", "ratio", "topology")
DEFAULT_SWEEPS = {
    "nodes": (2, 4, 6, 8, 10),
    "E_T": (1, 2, 3, 4, 5),
    "ratio": (1, 2, 3, 4, 5),
}
RUN_COLUMNS = ["run", "seed", "strategy", "importance_sum", "generated", "received", "discarded", "lifetime_epochs"]


# --------------------------------------------------------------------------
# scenario sources
# --------------------------------------------------------------------------


def _number(text):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            raise ScenarioError(f"not a number: {text!r}") from None


def parse_builder(source):
    """``"line:n=10,E_T=5"`` -> ``("line", {"n": 10, "E_T": 5})``."""
    name, _, rest = source.partition(":")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise ScenarioError(f"builder parameter {item!r} is not key=value")
        params[key.strip()] = _number(value.strip())
    return name.strip().lower(), params


def _take(params, allowed, builder):
    unknown = set(params) - set(allowed)
    if unknown:
        raise ScenarioError(f"unknown {builder} parameters: {sorted(unknown)}")
    return {allowed[k]: v for k, v in params.items()}


def build_scenario(name, params):
    """Build a scenario from a builder name and keyword parameters."""
    params = dict(params)
    if name == "line":
        kw = _take(params, {"n": "n", "E_S": "E_S", "E_R": "E_R", "E_T": "E_T", "battery": "battery"}, name)
        return build_line_scenario(**kw)
    if name == "tree":
        lo, hi = params.pop("E_T_min", 5), params.pop("E_T_max", 20)
        kw = _take(params, {"n": "n", "seed": "seed", "E_S": "E_S", "E_R": "E_R", "battery": "battery"}, name)
        return build_random_tree_scenario(E_T_range=(lo, hi), **kw)
    if name == "pair":
        kw = _take(params, {"e1": "e1", "e2": "e2"}, name)
        return build_pair_scenario(battery=(kw.get("e1", 1000), kw.get("e2", 1000)))
    if name == "single":
        kw = _take(params, {"c0": "c0", "c1": "c1", "battery": "battery", "p": "p_message"}, name)
        return build_single_node_scenario(**kw)
    raise ScenarioError(f"unknown scenario builder {name!r}; use line, tree, pair, single or a file path")


def load_scenario(source, overrides=None):
    """Scenario from a JSON file path or a builder string, with optional parameter overrides."""
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        if overrides:
            raise ScenarioError("sweeps need a builder scenario, not a file")
        return Scenario.load(path)
    name, params = parse_builder(source)
    params.update(overrides or {})
    return build_scenario(name, params)


# --------------------------------------------------------------------------
# spec
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    task: str
    scenario: str
    strategies: tuple = ("NS", "ST", "GCT")
    runs: int = 1
    seed: int = 0
    sweep: str | None = None
    values: tuple = ()
    emax: tuple = ()
    budget: int = exact.DEFAULT_CELL_BUDGET
    radius: float = 1e4
    steps: int = 200
    refresh: int = 500
    max_epochs: int | None = None
    workers: int = 1
    plots: bool = True
    out: str = "out"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ScenarioError(f"unknown task {self.task!r}")
        if self.sweep is not None and self.sweep not in SWEEP_AXES:
            raise ScenarioError(f"unknown sweep axis {self.sweep!r}; choose from {SWEEP_AXES}")
        if self.runs < 1:
            raise ScenarioError("runs must be at least 1")
        for name in self.strategies:
            sim.strategy_from_name(name)

    def to_dict(self):
        d = asdict(self)
        for k in ("out", "workers", "plots"):
            d.pop(k)  # do not change results
        d["strategies"] = list(self.strategies)
        d["values"] = list(self.values)
        d["emax"] = list(self.emax)
        path = Path(self.scenario)
        if path.exists():
            d["scenario_fingerprint"] = Scenario.load(path).fingerprint()
        return d

    @property
    def hash(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def preamble(self):
        return [f"spec_hash={self.hash}", f"seed={self.seed}"]


@dataclass
class ResultRecord:
    spec_hash: str
    out: Path
    files: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, path):
        self.files.append(Path(path).name)
        return path

    def write_manifest(self, spec):
        path = self.out / "manifest.json"
        doc = {"spec": spec.to_dict(), "spec_hash": self.spec_hash, "files": self.files, "summary": self.summary}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _start(spec):
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    return ResultRecord(spec.hash, out)


def _write_csv(path, spec, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in spec.preamble():
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path):
    """Header and rows of a CSV written here, skipping the comment preamble."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return rows[0], rows[1:]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_solve_exact(spec):
    """Value and threshold tables over the full energy lattice."""
    scenario = load_scenario(spec.scenario)
    e_max = np.asarray(spec.emax) if spec.emax else scenario.initial_energy
    if e_max.size == 1:
        e_max = e_max.reshape(())
    sol = exact.solve_exact(scenario, e_max, budget=spec.budget)
    rec = _start(spec)
    pre = spec.preamble()
    rec.add(exact.write_value_csv(sol, rec.out / "value.csv", pre))
    rec.add(exact.write_threshold_csv(sol, rec.out / "threshold.csv", pre))
    rec.summary = {"cells": int(sol.lam.size), "e_max": [int(c) for c in sol.e_max],
                   "value_at_max": float(sol.lam[tuple(sol.e_max)])}
    if spec.plots:
        _plot_exact(sol, rec)
    rec.write_manifest(spec)
    return rec


def _plot_exact(sol, rec):
    n = sol.scenario.n_nodes
    if n == 1:
        e = np.arange(sol.lam.shape[0])
        rec.add(plotting.plot_curves(e, {"threshold": sol.mu[0]}, rec.out / "threshold.png",
                                     "energy", "threshold"))
        rec.add(plotting.plot_curves(e, {"value": sol.lam}, rec.out / "value.png", "energy", "expected reward"))
    elif n == 2:
        e1, e2 = (np.arange(s) for s in sol.lam.shape)
        rec.add(plotting.plot_surface(e1, e2, sol.lam, rec.out / "value.png", "value function", "expected reward"))
        for j in range(2):
            rec.add(plotting.plot_surface(e1, e2, sol.mu[j], rec.out / f"threshold_source{j + 1}.png",
                                          f"threshold, source {j + 1}", "threshold"))


def cmd_solve_asymptotic(spec):
    """Constant thresholds and slopes for the scenario's batteries, plus the iteration trace."""
    scenario = load_scenario(spec.scenario)
    sol = asymptotic.main(scenario)
    rec = _start(spec)
    rows = [[j + 1, repr(float(sol.mu[j])), j + 1, repr(float(sol.w[j]))] for j in range(scenario.n_nodes)]
    rec.add(_write_csv(rec.out / "thresholds.csv", spec, ["source", "mu", "w_node", "w_value"], rows))
    trace = rec.out / "trace.txt"
    trace.write_text("\n".join(f"# {p}" for p in spec.preamble()) + "\n" + asymptotic.format_trace(sol) + "\n",
                     encoding="utf-8")
    rec.add(trace)
    rec.summary = {"critical": sol.partition.critical + 1, "chain": [k + 1 for k in sol.chain],
                   "iterations": sol.iterations, "oscillating": sol.oscillating}
    if spec.plots:
        x = np.arange(1, scenario.n_nodes + 1)
        rec.add(plotting.plot_curves(x, {"mu": sol.mu, "w": sol.w}, rec.out / "thresholds.png", "node", "value"))
    rec.write_manifest(spec)
    return rec


def _strategy(name, spec):
    s = sim.strategy_from_name(name)
    if isinstance(s, sim.GlobalCooperative):
        s.refresh_every = spec.refresh
    return s


def _aggregate_header():
    cols = ["n_runs"]
    for m in sim.METRICS:
        cols += [f"{m}_mean", f"{m}_std", f"{m}_ci_low", f"{m}_ci_high"]
    return cols


def _aggregate_cells(summary):
    cells = [summary[sim.METRICS[0]].n]
    for m in sim.METRICS:
        a = summary[m]
        cells += [repr(a.mean), repr(a.std), repr(a.ci_low), repr(a.ci_high)]
    return cells


def cmd_simulate(spec):
    """Replicated runs of each strategy on one scenario."""
    scenario = load_scenario(spec.scenario)
    rec = _start(spec)
    rows, agg, results = [], [], {}
    for name in spec.strategies:
        res = sim.run_replications(scenario, _strategy(name, spec), spec.runs, spec.seed,
                                   workers=spec.workers, max_epochs=spec.max_epochs)
        results[name] = res
        rows += [m.row() for m in res.runs]
        agg.append([name, *_aggregate_cells(res.summary)])
    deaths = [f"death_epoch_{i + 1}" for i in range(scenario.n_nodes)]
    rec.add(_write_csv(rec.out / "runs.csv", spec, RUN_COLUMNS + deaths, rows))
    rec.add(_write_csv(rec.out / "aggregate.csv", spec, ["strategy", *_aggregate_header()], agg))
    rec.summary = {name: {m: r[m].mean for m in sim.METRICS} for name, r in results.items()}
    if spec.plots:
        s = [results[n]["importance_sum"] for n in spec.strategies]
        rec.add(plotting.plot_bars(spec.strategies, [a.mean for a in s], [a.ci_low for a in s],
                                   [a.ci_high for a in s], rec.out / "importance_sum.png",
                                   "received importance sum"))
    rec.write_manifest(spec)
    return rec


def sweep_points(spec):
    """``(value, overrides)`` pairs for the spec's sweep axis."""
    if spec.sweep is None:
        return [(None, {})]
    if spec.sweep == "topology":
        count = spec.values[0] if len(spec.values) == 1 else 100
        return [(k, {"seed": sim.derive_seed(spec.seed, k, purpose=1)}) for k in range(int(count))]
    values = spec.values or DEFAULT_SWEEPS[spec.sweep]
    if spec.sweep == "nodes":
        return [(v, {"n": int(v)}) for v in values]
    if spec.sweep == "E_T":
        return [(v, {"E_T": v}) for v in values]
    return [(v, {"E_T": v, "E_R": 5}) for v in values]


def cmd_experiment(spec):
    """Replicated runs of every strategy at every sweep point.

    Rows are ordered by (sweep point, strategy, run index).  For the
    topology axis a final ``pooled`` row per strategy aggregates all runs
    over all topologies.
    """
    if spec.sweep == "topology" and not spec.scenario.startswith("tree"):
        raise ScenarioError("the topology sweep needs a tree builder scenario")
    rec = _start(spec)
    points = sweep_points(spec)
    raw, agg = [], []
    pooled = {name: [] for name in spec.strategies}
    curves = {name: ([], [], []) for name in spec.strategies}
    n_max = 0
    axis = spec.sweep or "none"
    for value, overrides in points:
        scenario = load_scenario(spec.scenario, overrides)
        n_max = max(n_max, scenario.n_nodes)
        label = "" if value is None else value
        for name in spec.strategies:
            res = sim.run_replications(scenario, _strategy(name, spec), spec.runs, spec.seed,
                                       workers=spec.workers, max_epochs=spec.max_epochs)
            raw += [[axis, label, *m.row()] for m in res.runs]
            agg.append([axis, label, name, *_aggregate_cells(res.summary)])
            pooled[name] += list(res.runs)
            imp = res["importance_sum"]
            for seq, v in zip(curves[name], (imp.mean, imp.ci_low, imp.ci_high)):
                seq.append(v)
    if spec.sweep == "topology":
        for name in spec.strategies:
            summary = {m: sim.aggregate([getattr(r, m) for r in pooled[name]]) for m in sim.METRICS}
            agg.append([axis, "pooled", name, *_aggregate_cells(summary)])
            rec.summary[name] = {m: summary[m].mean for m in sim.METRICS}
    header = ["sweep_axis", "sweep_value", *RUN_COLUMNS, *[f"death_epoch_{i + 1}" for i in range(n_max)]]
    raw = [r + [""] * (len(header) - len(r)) for r in raw]
    rec.add(_write_csv(rec.out / "raw.csv", spec, header, raw))
    rec.add(_write_csv(rec.out / "aggregate.csv", spec,
                       ["sweep_axis", "sweep_value", "strategy", *_aggregate_header()], agg))
    if not rec.summary:
        rec.summary = {f"{r[0]}={r[1]}/{r[2]}": float(r[4]) for r in agg}
    if spec.plots:
        _plot_experiment(spec, points, curves, rec)
    rec.write_manifest(spec)
    return rec


def _plot_experiment(spec, points, curves, rec):
    path = rec.out / "importance_sum.png"
    if spec.sweep in (None, "topology"):
        # one bar per strategy; for topologies, the spread across trees
        means, lo, hi = [], [], []
        for name in spec.strategies:
            m, l, h = (np.asarray(s) for s in curves[name])
            agg = sim.aggregate(m) if spec.sweep else sim.Aggregate(m[0], 0.0, l[0], h[0], 1)
            means.append(agg.mean)
            lo.append(agg.ci_low)
            hi.append(agg.ci_high)
        rec.add(plotting.plot_bars(spec.strategies, means, lo, hi, path, "received importance sum"))
        return
    x = [v for v, _ in points]
    series = {name: tuple(np.asarray(s) for s in curves[name]) for name in spec.strategies}
    rec.add(plotting.plot_sweep(x, series, path, spec.sweep, "received importance sum"))


# --------------------------------------------------------------------------
# lifetime sweep
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LifetimeSweep:
    """Thresholds and lifetimes along a quarter circle of energy directions.

    ``crossing`` and ``transition`` are fractional grid positions: where the
    lifetime gap ``T_1 - T_2`` changes sign, and where the threshold that
    moves most is halfway between its values at the two ends of the sweep.
    Where the two lifetimes are equal over a stretch of directions the
    crossing is the middle of that stretch.
    """

    phi: np.ndarray
    energy: np.ndarray
    mu: np.ndarray
    T: np.ndarray
    critical: np.ndarray
    crossing: float
    transition: float

    @property
    def step(self):
        return float(self.phi[1] - self.phi[0])

    def at(self, position):
        """Direction at a fractional grid position."""
        return float(np.interp(position, np.arange(self.phi.size), self.phi))


def _crossing(T, rtol=1e-9):
    gap = (T[:, 0] - T[:, 1]) / np.maximum(T[:, 0] + T[:, 1], 1e-300)
    sign = np.where(np.abs(gap) <= rtol, 0, np.sign(gap))
    ties = np.flatnonzero(sign == 0)
    if ties.size:
        return 0.5 * (ties[0] + ties[-1])
    flips = np.flatnonzero(sign[1:] != sign[:-1])
    if not flips.size:
        return -1.0
    k = int(flips[0])
    return k + gap[k] / (gap[k] - gap[k + 1])


def _transition(mu):
    j = int(np.argmax(np.abs(mu[-1] - mu[0])))
    y = mu[:, j]
    if y[-1] == y[0]:
        return -1.0
    half = 0.5 * (y[0] + y[-1])
    above = (y - half) * np.sign(y[-1] - y[0]) >= 0
    k = int(np.argmax(above))
    if k == 0:
        return 0.0
    return (k - 1) + (half - y[k - 1]) / (y[k] - y[k - 1])


def lifetime_sweep(scenario, radius=1e4, steps=200):
    """Thresholds and lifetimes along ``e = r (cos phi, sin phi)``, ``0 < phi < pi/2``.

    Lifetimes are the stationary ones under the returned thresholds.
    """
    if scenario.n_nodes != 2:
        raise ScenarioError("the lifetime sweep needs a 2-node scenario")
    phi = np.linspace(0.0, np.pi / 2, steps + 2)[1:-1]
    energy = radius * np.column_stack([np.cos(phi), np.sin(phi)])
    mu = np.empty((steps, 2))
    T = np.empty((steps, 2))
    critical = np.empty(steps, dtype=np.int64)
    for k, e in enumerate(energy):
        sol = asymptotic.main(scenario, e)
        mu[k] = sol.mu
        T[k] = asymptotic.stationary_lifetimes(scenario, sol.mu, e).T
        critical[k] = sol.partition.critical
    return LifetimeSweep(phi, energy, mu, T, critical, _crossing(T), _transition(mu))


def cmd_lifetime_sweep(spec):
    scenario = load_scenario(spec.scenario)
    res = lifetime_sweep(scenario, spec.radius, spec.steps)
    rec = _start(spec)
    rows = [[repr(float(res.phi[k])), repr(float(res.energy[k, 0])), repr(float(res.energy[k, 1])),
             repr(float(res.mu[k, 0])), repr(float(res.mu[k, 1])), repr(float(res.T[k, 0])),
             repr(float(res.T[k, 1])), int(res.critical[k]) + 1] for k in range(res.phi.size)]
    rec.add(_write_csv(rec.out / "lifetime_sweep.csv", spec,
                       ["phi", "e_1", "e_2", "mu_1", "mu_2", "T_1", "T_2", "critical"], rows))
    rec.summary = {
        "crossing_position": res.crossing,
        "transition_position": res.transition,
        "crossing_phi": res.at(res.crossing) if res.crossing >= 0 else None,
        "transition_phi": res.at(res.transition) if res.transition >= 0 else None,
        "grid_step": res.step,
    }
    if spec.plots:
        rec.add(plotting.plot_lifetime_sweep(res.phi, res.mu, res.T, rec.out / "lifetime_sweep.png"))
    rec.write_manifest(spec)
    return rec


COMMANDS = {
    "solve-exact": cmd_solve_exact,
    "solve-asymptotic": cmd_solve_asymptotic,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "lifetime-sweep": cmd_lifetime_sweep,
}


def run(spec):
    return COMMANDS[spec.task](spec)
