"""Discrete-time Kalman analysis, ETKF, and state augmentation.

The linear pieces follow the textbook square-root-free update with a
Joseph-form covariance so the posterior stays symmetric PSD; the
ensemble transform uses the deterministic symmetric square root in
ensemble space, which preserves the ensemble mean and reproduces the
Kalman mean/covariance exactly for linear observation operators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (ConfigurationError, DegenerateEnsembleError,
                     NumericalError)

INNOVATION_JITTER = 1e-10  # scaled by trace(S)/m on a failed factorization


def symmetrize(mat):
    return 0.5 * (mat + mat.T)


def clip_psd(cov, tol=1e-10):
    """Clip tiny negative eigenvalues (>= -tol * scale) to zero."""
    cov = symmetrize(np.asarray(cov, dtype=float))
    w, v = np.linalg.eigh(cov)
    scale = max(abs(w[0]), abs(w[-1]), 1e-300)
    if w[0] < -tol * scale:
        raise NumericalError(
            f"covariance has eigenvalue {w[0]:.3e} below the PSD tolerance")
    if w[0] >= 0.0:
        return cov
    w = np.clip(w, 0.0, None)
    return symmetrize((v * w) @ v.T)


@dataclass
class GaussianBelief:
    """Mean vector and symmetric PSD covariance carried by a filter."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (self.mean.size, self.mean.size):
            raise ConfigurationError("covariance shape does not match mean")
        self.cov = symmetrize(cov)

    @property
    def dim(self):
        return self.mean.size


@dataclass
class Ensemble:
    """Equally weighted ensemble; covariance uses the 1/(k-1) convention."""

    members: np.ndarray  # (k, d)

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        if self.members.shape[0] < 2:
            raise DegenerateEnsembleError("an ensemble needs at least 2 members")

    @property
    def size(self):
        return self.members.shape[0]

    @property
    def dim(self):
        return self.members.shape[1]

    def mean(self):
        return self.members.mean(axis=0)

    def anomalies(self):
        return self.members - self.mean()

    def cov(self):
        a = self.anomalies()
        return a.T @ a / (self.size - 1)


@dataclass(frozen=True)
class LinearObs:
    """Linear observation model v = H x + noise, noise ~ N(0, R)."""

    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, float)))
        if self.R.shape[0] != self.R.shape[1] or self.R.shape[0] != self.H.shape[0]:
            raise ConfigurationError("R must be square and match H rows")
        if not np.allclose(self.R, self.R.T):
            raise ConfigurationError("R must be symmetric")
        if np.any(np.linalg.eigvalsh(self.R) <= 0):
            raise ConfigurationError("R must be positive definite")


def kf_forecast(belief, transition, process_cov):
    """Linear-Gaussian forecast: mean <- F mean, cov <- F cov F' + Q."""
    f_mat = np.atleast_2d(np.asarray(transition, dtype=float))
    q_mat = np.atleast_2d(np.asarray(process_cov, dtype=float))
    mean = f_mat @ belief.mean
    cov = symmetrize(f_mat @ belief.cov @ f_mat.T + q_mat)
    return GaussianBelief(mean, cov)


def _solve_spd(s_mat, rhs, jitter_events=None):
    """Solve S X = rhs for symmetric positive definite S, with one retry.

    A failed Cholesky retries once with jitter 1e-10 * trace/m on the
    diagonal (recorded in ``jitter_events`` when provided), then raises
    :class:`NumericalError` carrying the condition number.
    """
    try:
        chol = sla.cho_factor(s_mat, lower=True)
        return sla.cho_solve(chol, rhs)
    except np.linalg.LinAlgError:
        pass
    except sla.LinAlgError:
        pass
    jitter = INNOVATION_JITTER * np.trace(s_mat) / s_mat.shape[0]
    if jitter_events is not None:
        jitter_events.append(jitter)
    try:
        chol = sla.cho_factor(s_mat + jitter * np.eye(s_mat.shape[0]), lower=True)
        return sla.cho_solve(chol, rhs)
    except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise NumericalError("innovation covariance is singular",
                             cond=float(np.linalg.cond(s_mat))) from exc


def kf_analysis(belief, obs, lin_obs, jitter_events=None):
    """Kalman analysis with a Joseph-form symmetric covariance update."""
    h_mat, r_mat = lin_obs.H, lin_obs.R
    obs = np.atleast_1d(np.asarray(obs, dtype=float))
    if obs.size != h_mat.shape[0]:
        raise ConfigurationError("observation dimension does not match H")
    p_mat = belief.cov
    s_mat = symmetrize(h_mat @ p_mat @ h_mat.T + r_mat)
    # K = P H' S^{-1} via the SPD solve of S K' = H P
    gain = _solve_spd(s_mat, h_mat @ p_mat, jitter_events).T
    innovation = obs - h_mat @ belief.mean
    mean = belief.mean + gain @ innovation
    i_kh = np.eye(belief.dim) - gain @ h_mat
    cov = symmetrize(i_kh @ p_mat @ i_kh.T + gain @ r_mat @ gain.T)
    return GaussianBelief(mean, cov)


def stationary_analysis_cov(transition, process_cov, lin_obs, tol=1e-12,
                            max_iter=100_000):
    """Iterate forecast/analysis covariances to the Riccati fixed point."""
    f_mat = np.atleast_2d(np.asarray(transition, dtype=float))
    q_mat = np.atleast_2d(np.asarray(process_cov, dtype=float))
    belief = GaussianBelief(np.zeros(f_mat.shape[0]), q_mat + np.eye(f_mat.shape[0]))
    obs = np.zeros(lin_obs.H.shape[0])
    prev = belief.cov
    for _ in range(max_iter):
        belief = kf_analysis(kf_forecast(belief, f_mat, q_mat), obs, lin_obs)
        if np.max(np.abs(belief.cov - prev)) < tol * max(1.0, np.max(np.abs(prev))):
            return belief.cov
        prev = belief.cov
    raise NumericalError("Riccati iteration did not converge")


def ensemble_from_belief(belief, size=None):
    """Deterministic ensemble whose empirical mean/cov equal the belief.

    Uses +/- scaled covariance square-root columns, so ``size`` must be
    2*dim (the default).
    """
    d = belief.dim
    if size is None:
        size = 2 * d
    if size != 2 * d:
        raise ConfigurationError("ensemble_from_belief needs size = 2*dim")
    w, v = np.linalg.eigh(clip_psd(belief.cov))
    root = (v * np.sqrt(np.clip(w, 0.0, None)))  # cov = root @ root.T
    scale = math.sqrt((size - 1) / 2.0)
    pert = np.concatenate([scale * root.T, -scale * root.T], axis=0)
    return Ensemble(belief.mean + pert)


def _sample_psd(cov, size, rng):
    """Draw N(0, cov) rows for a merely PSD covariance."""
    w, v = np.linalg.eigh(symmetrize(np.asarray(cov, dtype=float)))
    w = np.clip(w, 0.0, None)
    root = v * np.sqrt(w)
    return rng.standard_normal((size, cov.shape[0])) @ root.T


def etkf_analysis(ens, obs, obs_model, additive_q=None, rng=None,
                  inflation=1.0):
    """Deterministic square-root ensemble analysis in ensemble space.

    ``obs_model`` is a :class:`LinearObs` or a tuple ``(h_fn, R)`` with a
    callable applied member-wise.  When ``additive_q`` is given, N(0, Q)
    draws are added to the forecast members before the transform, which
    realizes additive covariance inflation at the ensemble level.
    """
    members = np.array(ens.members, dtype=float)
    k = members.shape[0]
    if k < 2:
        raise DegenerateEnsembleError("ETKF needs at least 2 members")

    if additive_q is not None:
        q_mat = np.atleast_2d(np.asarray(additive_q, dtype=float))
        if np.any(np.diag(q_mat) < 0):
            raise ConfigurationError("additive Q must be PSD")
        if np.any(q_mat != 0.0):
            if rng is None:
                raise ConfigurationError("additive Q perturbations need an rng")
            members = members + _sample_psd(q_mat, k, rng)

    xbar = members.mean(axis=0)
    anom = members - xbar
    if np.max(np.abs(anom)) == 0.0:
        raise DegenerateEnsembleError("ensemble has collapsed to a point")

    if isinstance(obs_model, LinearObs):
        y_members = members @ obs_model.H.T
        r_mat = obs_model.R
    else:
        h_fn, r_mat = obs_model
        y_members = np.asarray([h_fn(m) for m in members], dtype=float)
        r_mat = np.atleast_2d(np.asarray(r_mat, dtype=float))
    ybar = y_members.mean(axis=0)
    y_anom = y_members - ybar  # (k, m)

    obs = np.atleast_1d(np.asarray(obs, dtype=float))
    rinv_y = _solve_spd(r_mat, y_anom.T)          # (m, k)
    a_mat = symmetrize((k - 1) / inflation * np.eye(k) + y_anom @ rinv_y)
    w, v = np.linalg.eigh(a_mat)
    w = np.clip(w, 1e-300, None)
    pa_tilde = (v / w) @ v.T                       # [(k-1)I/rho + Y'R^-1 Y]^-1
    w_mean = pa_tilde @ (rinv_y.T @ (obs - ybar))
    w_pert = (v * np.sqrt((k - 1) / w)) @ v.T      # symmetric sqrt of (k-1) Pa
    weights = w_mean[None, :] + w_pert
    return Ensemble(xbar + weights @ anom)


@dataclass(frozen=True)
class AugmentedSystem:
    """Joint (state, parameter) system for augmented-state filtering.

    The parameter block is frozen during the deterministic forecast
    (persistence) and, for the white-noise model, receives N(0, noise_std^2 dt)
    kicks via :meth:`perturb_params`.
    """

    base_drift: object          # f(x, theta, t) -> dx/dt
    n_state: int
    n_param: int
    param_model: str = "persistence"   # or "white"
    noise_std: float = 0.0

    def __post_init__(self):
        if self.param_model not in ("persistence", "white"):
            raise ConfigurationError("param_model must be persistence or white")
        if self.param_model == "white" and self.noise_std < 0:
            raise ConfigurationError("white-noise parameter model needs std >= 0")

    def drift(self, z, t=0.0):
        x = z[..., : self.n_state]
        theta = z[..., self.n_state:]
        dx = self.base_drift(x, theta, t)
        return np.concatenate([dx, np.zeros_like(theta)], axis=-1)

    def perturb_params(self, members, dt, rng):
        """Apply the parameter-evolution noise for one interval ``dt``."""
        if self.param_model == "persistence" or self.noise_std == 0.0:
            return members
        kick = self.noise_std * math.sqrt(dt) * rng.standard_normal(
            members[..., self.n_state:].shape)
        out = np.array(members, dtype=float)
        out[..., self.n_state:] += kick
        return out


def augment_state(base_drift, n_state, n_param, param_model="persistence",
                  noise_std=0.0):
    """Wrap a parameterized drift f(x, theta, t) as a joint (x, theta) system."""
    return AugmentedSystem(base_drift, n_state, n_param, param_model, noise_std)
