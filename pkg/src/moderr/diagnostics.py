"""Shared metrics: RMSE, autocorrelation, 1-d densities, climatology.

All reductions run in a fixed order over the given arrays, so repeated
calls on identical inputs are bit-identical.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import gaussian_kde

from .errors import ConfigurationError, DomainError


def rmse(a, b):
    """Root mean squared difference, averaged over time and components."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ConfigurationError("rmse needs equal-length nonempty series")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def acf(series, max_lag):
    """Biased autocorrelation estimate, normalized so acf(0) = 1."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if max_lag >= n / 10:
        raise ConfigurationError("max_lag must be below length/10")
    x = x - x.mean()
    c0 = float(np.dot(x, x)) / n
    if c0 == 0.0:
        raise DomainError("zero-variance series has no autocorrelation")
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        out[lag] = np.dot(x[: n - lag], x[lag:]) / n / c0
    return out


def density1d(samples, method="histogram", grid=None, bins=100, pad=0.05):
    """Normalized 1-d density estimate on a grid; trapezoid integral = 1.

    ``histogram`` counts into equal cells (an explicit uniform ``grid``
    is treated as the cell centers, so several sample sets can share one
    grid); ``kernel`` evaluates a Gaussian KDE with the Silverman
    bandwidth.  Returns (grid, pdf).
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 100:
        raise ConfigurationError("density estimation needs at least 100 samples")
    lo, hi = x.min(), x.max()
    if hi == lo:
        raise DomainError("degenerate samples with zero spread")
    width = hi - lo
    lo, hi = lo - pad * width, hi + pad * width
    if grid is None:
        edges = np.linspace(lo, hi, bins + 1)
        grid = 0.5 * (edges[:-1] + edges[1:])
    else:
        grid = np.asarray(grid, dtype=float)
        half = 0.5 * (grid[1] - grid[0])
        edges = np.concatenate([grid - half, [grid[-1] + half]])

    if method == "histogram":
        counts, _ = np.histogram(x, bins=edges)
        pdf = counts.astype(float)
    elif method == "kernel":
        pdf = gaussian_kde(x, bw_method="silverman")(grid)
    else:
        raise ConfigurationError(f"unknown density method {method!r}")

    total = np.trapezoid(pdf, grid)
    if total <= 0:
        raise DomainError("density estimate integrated to zero")
    return grid, pdf / total


def l1_density_distance(p, q, grid):
    """Trapezoid L1 distance between two densities on a common grid."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(np.trapezoid(np.abs(p - q), np.asarray(grid, dtype=float)))


def climatological_error(run):
    """Forecast-error saturation level from a long stationary run.

    Equals the RMSE between two independent draws from the invariant
    measure: sqrt(2) times the stationary standard deviation, aggregated
    over components as sqrt(mean of 2 Var_c).
    """
    x = np.atleast_2d(np.asarray(run, dtype=float))
    if x.shape[0] == 1:
        x = x.T
    var = x.var(axis=0)
    return float(np.sqrt(2.0 * var.mean()))
