"""Figures written next to the CSV outputs.

Everything renders through the Agg backend with fixed metadata, so the
same data always produces the same PNG bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_surface(axis0, axis1, values, path, title="", label=""):
    """Heat map of a 2-D lattice table; ``values[i, j]`` sits at ``(axis0[i], axis1[j])``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.grid(False)
        mesh = ax.pcolormesh(axis0, axis1, np.asarray(values).T, shading="nearest", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label=label)
        ax.set_xlabel("$e_1$")
        ax.set_ylabel("$e_2$")
        ax.set_title(title)
        return _save(fig, path)


def plot_curves(x, series, path, xlabel="", ylabel="", title=""):
    """One line per entry of ``series`` (name -> y values)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, y in series.items():
            ax.plot(x, y, label=name, lw=1.2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if len(series) > 1:
            ax.legend()
        return _save(fig, path)


def plot_bars(names, means, lows, highs, path, ylabel="", title=""):
    """Bar chart with confidence-interval whiskers."""
    means = np.asarray(means, dtype=float)
    err = np.vstack([means - np.asarray(lows, dtype=float), np.asarray(highs, dtype=float) - means])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(names)), means, yerr=err, capsize=4, color="0.6", edgecolor="k", lw=0.6)
        ax.set_xticks(range(len(names)), names)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        return _save(fig, path)


def plot_sweep(x, series, path, xlabel="", ylabel="", title=""):
    """Mean with CI band per strategy; ``series`` maps name -> (mean, low, high)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, (mean, lo, hi) in series.items():
            line, = ax.plot(x, mean, marker="o", ms=3, lw=1.2, label=name)
            ax.fill_between(x, lo, hi, color=line.get_color(), alpha=0.2, lw=0)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_lifetime_sweep(phi, mu, T, path):
    """Thresholds (top) and stationary lifetimes (bottom) against the energy direction."""
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(5.5, 5.0))
        for j in range(mu.shape[1]):
            top.plot(phi, mu[:, j], lw=1.2, label=f"$\\mu_{j + 1}$")
            bottom.plot(phi, T[:, j], lw=1.2, label=f"$T_{j + 1}$")
        top.set_ylabel("asymptotic threshold")
        bottom.set_ylabel("lifetime (epochs)")
        bottom.set_xlabel(r"direction $\phi$ (rad)")
        top.legend()
        bottom.legend()
        return _save(fig, path)
