"""Moment equations for the scalar quadratic error model, with oracle.

For de/dt = a e + b e^2 the first two centered moments evolve as

    dm/dt = a m + b m^2 + b Q
    dQ/dt = 2 (a + 2 b m) Q + 2 b S

where S is the third centered moment, so the hierarchy is open; a
closure switch either pins S to zero (Gaussian-style truncation) or
carries the initial S unchanged.  A Monte-Carlo solver for the same
flow serves as the independent reference, and the error-decomposition
identity relates truth/model covariances exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DomainError, IntegrationBlowup
from .models import rk4_step

ESCAPE_THRESHOLD = 1e8


class Closure(Enum):
    GAUSSIAN_S0 = "gaussian_s0"   # set S = 0
    CARRY_S = "carry_s"           # hold S at its input value


@dataclass(frozen=True)
class MomentState:
    mean: float
    var: float
    skew_moment: float = 0.0  # third centered moment

    def __post_init__(self):
        if self.var < 0:
            raise ConfigurationError("variance must be nonnegative")

    def as_array(self):
        return np.array([self.mean, self.var, self.skew_moment])


def moment_rhs(m, a, b, closure=Closure.GAUSSIAN_S0):
    """Time derivative (d mean, d var, 0) under the chosen closure."""
    s = 0.0 if closure is Closure.GAUSSIAN_S0 else m.skew_moment
    dmean = a * m.mean + b * m.mean ** 2 + b * m.var
    dvar = 2.0 * (a + 2.0 * b * m.mean) * m.var + 2.0 * b * s
    return np.array([dmean, dvar, 0.0])


def integrate_moments(m0, a, b, t_end, h, closure=Closure.GAUSSIAN_S0):
    """RK4 integration of the closed moment system.

    Returns (times, states) where states[k] is the MomentState at times[k].
    """
    if t_end <= 0 or h <= 0:
        raise ConfigurationError("t_end and h must be positive")
    n = int(round(t_end / h))
    s_frozen = 0.0 if closure is Closure.GAUSSIAN_S0 else m0.skew_moment

    def rhs(y, t):
        state = MomentState(y[0], max(y[1], 0.0), s_frozen)
        return moment_rhs(state, a, b, closure)

    times = np.linspace(0.0, n * h, n + 1)
    out = [m0]
    y = m0.as_array()
    for k in range(n):
        y = rk4_step(rhs, y, times[k], h)
        out.append(MomentState(y[0], max(y[1], 0.0), s_frozen))
    return times, out


def liouville_mc_oracle(sampler, a, b, t_end, h, n_samples, rng,
                        n_out=None):
    """Monte-Carlo reference for the quadratic-flow moment evolution.

    Integrates ``n_samples`` draws from ``sampler(rng, n)`` through
    de/dt = a e + b e^2 with RK4 and returns empirical centered moments.
    Samples escaping past a fixed threshold (the quadratic flow blows up
    in finite time from large positives) are dropped from the statistics
    and counted.

    Returns (times, means, vars, skews, escaped_fraction_per_time).
    """
    if n_samples < 10_000:
        raise ConfigurationError("the oracle needs at least 1e4 samples")
    n = int(round(t_end / h))
    if n_out is None:
        n_out = n
    stride = max(n // n_out, 1)
    e = np.asarray(sampler(rng, n_samples), dtype=float)
    alive = np.isfinite(e) & (np.abs(e) < ESCAPE_THRESHOLD)

    times, means, vars, skews, escaped = [0.0], [], [], [], []

    def record():
        ok = e[alive]
        if ok.size < 2:
            raise DomainError("all oracle samples escaped")
        mu = ok.mean()
        d = ok - mu
        means.append(mu)
        vars.append(np.mean(d ** 2))
        skews.append(np.mean(d ** 3))
        escaped.append(1.0 - ok.size / n_samples)

    record()
    t = 0.0
    for k in range(1, n + 1):
        de = e[alive]
        # one vectorized RK4 stage set for the scalar quadratic flow
        f = lambda s, _t: a * s + b * s * s
        k1 = f(de, t)
        k2 = f(de + 0.5 * h * k1, t)
        k3 = f(de + 0.5 * h * k2, t)
        k4 = f(de + h * k3, t)
        de = de + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        e[alive] = de
        with np.errstate(invalid="ignore"):
            still = np.isfinite(de) & (np.abs(de) < ESCAPE_THRESHOLD)
        alive[alive] = still
        t += h
        if k % stride == 0 or k == n:
            times.append(t)
            record()
    return (np.array(times), np.array(means), np.array(vars),
            np.array(skews), np.array(escaped))


@dataclass(frozen=True)
class ErrorDecomposition:
    """Empirical pieces of the truth/model covariance identity."""

    mean_error: np.ndarray       # mean of e = x - x_model
    truth_cov: np.ndarray        # P
    model_cov: np.ndarray        # P tilde
    cross_cov: np.ndarray        # Q_{x~ e}
    error_cov: np.ndarray        # Q

    @property
    def identity_residual(self):
        rhs = (self.model_cov + self.cross_cov + self.cross_cov.T
               + self.error_cov)
        return float(np.max(np.abs(self.truth_cov - rhs)))


def decompose_error(truth_samples, model_samples):
    """Split the truth covariance into model, cross and error parts.

    For paired samples x_i (truth) and x~_i (model estimate) with
    e_i = x_i - x~_i, the empirical covariances satisfy
    P = P~ + Q_{x~e} + Q_{ex~} + Q exactly, whatever the data.
    """
    x = np.asarray(truth_samples, dtype=float)
    xm = np.asarray(model_samples, dtype=float)
    if x.shape != xm.shape:
        raise ConfigurationError("paired samples must have equal shapes")
    if x.ndim == 1:
        x, xm = x[:, None], xm[:, None]
    if x.shape[0] < 2:
        raise ConfigurationError("need at least 2 samples for covariances")
    e = x - xm
    n = x.shape[0]

    def center(z):
        return z - z.mean(axis=0)

    xc, xmc, ec = center(x), center(xm), center(e)
    denom = n - 1
    return ErrorDecomposition(
        mean_error=e.mean(axis=0),
        truth_cov=xc.T @ xc / denom,
        model_cov=xmc.T @ xmc / denom,
        cross_cov=xmc.T @ ec / denom,
        error_cov=ec.T @ ec / denom,
    )
