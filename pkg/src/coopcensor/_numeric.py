"""Compiled scalar helpers shared by the solvers."""

from functools import lru_cache

import numba as nb
import numpy as np

EXPONENTIAL, DISCRETE = 0, 1


@nb.njit(cache=True)
def excess(kind, mean, vals, probs, t):
    """E{(x - t)^+} for one importance model."""
    if kind == EXPONENTIAL:
        if t >= 0.0:
            return mean * np.exp(-t / mean)
        return mean - t
    s = 0.0
    for k in range(vals.size):
        d = vals[k] - t
        if d > 0.0:
            s += probs[k] * d
    return s


@nb.njit(cache=True)
def _reward_sum(w, col, beta, p, q, kinds, means, vals, probs):
    s = 0.0
    for j in range(col.size):
        t = col[j] * w + beta[j]
        if q[j] > 0.0:
            s += p[j] * q[j] * excess(kinds[j], means[j], vals[j], probs[j], t / q[j])
        elif t < 0.0:
            s -= p[j] * t
    return s


@nb.njit(cache=True)
def bisect_slope(cbar, alpha, col, beta, p, q, kinds, means, vals, probs, tol):
    """Root of ``cbar w + alpha = sum_j p_j q_j E{(x_j - (col_j w + beta_j)/q_j)^+}`` on w >= 0.

    The right side never exceeds its value at 0, so the root lies in
    ``[0, (rhs(0) - alpha) / cbar]``.  Returns -1.0 if that bracket fails to
    hold a sign change.
    """
    r0 = _reward_sum(0.0, col, beta, p, q, kinds, means, vals, probs)
    if alpha >= r0:
        return 0.0
    lo, hi = 0.0, (r0 - alpha) / cbar
    if cbar * hi + alpha < _reward_sum(hi, col, beta, p, q, kinds, means, vals, probs):
        return -1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cbar * mid + alpha < _reward_sum(mid, col, beta, p, q, kinds, means, vals, probs):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@lru_cache(maxsize=256)
def importance_arrays(models):
    """Pack a tuple of importance models into flat arrays for the kernels."""
    n = len(models)
    width = max([len(m.values) for m in models] + [1])
    kinds = np.zeros(n, dtype=np.int64)
    means = np.ones(n)
    vals = np.zeros((n, width))
    probs = np.zeros((n, width))
    for j, m in enumerate(models):
        if m.kind == "exponential":
            kinds[j], means[j] = EXPONENTIAL, m.mean
        else:
            kinds[j] = DISCRETE
            vals[j, : len(m.values)] = m.values
            probs[j, : len(m.probs)] = m.probs
    for a in (kinds, means, vals, probs):
        a.setflags(write=False)
    return kinds, means, vals, probs
