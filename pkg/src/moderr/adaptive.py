"""Adaptive estimation of process/observation noise from innovations.

A secondary Kalman filter updates the noise parameters theta = (q..., r)
of the primary filter from products of lagged innovations.  The
pseudo-observation model is linear in theta: under a frozen primary
gain K the stationary prior error covariance is

    P(theta) = sum_j  Fbar^j (Q(theta) + F K R(theta) K' F') (Fbar')^j,
    Fbar = F (I - K H),

so every innovation product statistic

    E[d_m d_m']      = H P(theta) H' + R(theta)
    E[d_m d_{m-l}']  = H Fbar^{l-1} F (P(theta) H' - K E[d d'])   (l >= 1)

is a linear functional of theta.  Each cycle the sensitivities are
rebuilt from the primary filter's current P_b, H, K; when the
transition matrix is unknown (ensemble filters on nonlinear models) an
isotropic surrogate F = phi I is inferred from the trace balance
tr(P_b - Q) = phi^2 tr(P_a).  Noise covariances of the pseudo
observations use the Gaussian fourth-moment closure.

The modeled entry subset per lag is the diagonal of d_m d_{m-l}' plus,
when ``include_offdiag`` is set, its cyclic first superdiagonal.  The
off-diagonal entries identify banded off-diagonal process noise (which
is invisible to isotropic gains through diagonals alone), and keeping
per-entry lag products rather than their trace avoids the phase
cancellation that wipes out the q/r split for rotation-like dynamics.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

R_MIN_DEFAULT = 1e-6


@dataclass(frozen=True)
class NoiseParams:
    """Banded process noise (diagonal q1, cyclic off-diagonal q2), R = r I."""

    q1: float
    q2: float
    r: float

    def __post_init__(self):
        if self.q1 < 0 or self.r <= 0:
            raise ConfigurationError("need q1 >= 0 and r > 0")


def innovation(obs_value, forecast_mean, h_mat):
    """d_m = v_m - H xbar^b."""
    h_mat = np.atleast_2d(np.asarray(h_mat, dtype=float))
    return np.atleast_1d(np.asarray(obs_value, dtype=float)) - \
        h_mat @ np.atleast_1d(np.asarray(forecast_mean, dtype=float))


def assemble_banded_q(q1, q2, n):
    """Symmetric circulant with q1 on the diagonal, q2 on the first band."""
    if n < 3:
        raise ConfigurationError("banded Q needs n >= 3")
    q = q1 * np.eye(n)
    idx = np.arange(n)
    q[idx, (idx + 1) % n] = q2
    q[(idx + 1) % n, idx] = q2
    return q


@dataclass
class LagBuffer:
    """Recent innovations, newest last; warm when it has lag+1 entries."""

    capacity: int
    values: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigurationError("lag buffer capacity must be >= 1")
        self.values = deque(maxlen=self.capacity)

    def push(self, d):
        self.values.append(np.asarray(d, dtype=float))

    def ready(self, lag):
        return len(self.values) >= lag + 1

    def pair(self, lag):
        """(d_m, d_{m-lag}); requires ready(lag)."""
        return self.values[-1], self.values[-1 - lag]


class AdaptiveNoiseEstimator:
    """Secondary Kalman filter over theta = (q coefficients..., r).

    ``q_bases`` lists symmetric PSD basis matrices; the process noise fed
    back to the primary filter is sum_i q_i * base_i and the observation
    noise is r * I.  ``projection`` post-processes the q coefficients
    after each update (e.g. the banded PSD condition q1 >= 2 |q2|).
    """

    def __init__(self, q_bases, q0, r0, *, lag=2, prior_rel_std=0.5,
                 rw_rel_var=1e-4, r_min=R_MIN_DEFAULT,
                 include_offdiag=False, projection=None, transition=None,
                 max_lyap_terms=200, lyap_tol=1e-10, spectral_cap=0.995):
        self.q_bases = [np.asarray(b, dtype=float) for b in q_bases]
        if not self.q_bases:
            raise ConfigurationError("need at least one process-noise basis")
        self.n = self.q_bases[0].shape[0]
        for b in self.q_bases:
            if b.shape != (self.n, self.n) or not np.allclose(b, b.T):
                raise ConfigurationError("q bases must be symmetric, same size")
        q0 = np.atleast_1d(np.asarray(q0, dtype=float))
        if q0.size != len(self.q_bases):
            raise ConfigurationError("q0 must provide one value per basis")
        if r0 <= 0:
            raise ConfigurationError("r0 must be positive")
        self.theta = np.concatenate([q0, [float(r0)]])
        # zero-initialized components still need room to move, so scales
        # are floored at a quarter of the mean initial magnitude
        floor = max(0.25 * np.mean(np.abs(self.theta)), 1e-3)
        scales = np.maximum(np.abs(self.theta), floor)
        self.cov = np.diag((prior_rel_std * scales) ** 2)
        self.rw_var = rw_rel_var * scales ** 2
        self.lag = int(lag)
        if self.lag < 1:
            raise ConfigurationError("lag must be >= 1")
        self.r_min = float(r_min)
        self.include_offdiag = bool(include_offdiag)
        self.projection = projection
        self.transition = transition
        self.max_lyap_terms = int(max_lyap_terms)
        self.lyap_tol = float(lyap_tol)
        self.spectral_cap = float(spectral_cap)
        self.buffer = LagBuffer(self.lag + 1)
        self.clip_count = 0
        self.truncation_count = 0
        self._context = None

    # -- current estimates -------------------------------------------------

    @property
    def n_q(self):
        return len(self.q_bases)

    @property
    def q_coeffs(self):
        return self.theta[: self.n_q]

    @property
    def r(self):
        return float(self.theta[-1])

    def q_matrix(self):
        out = np.zeros((self.n, self.n))
        for c, b in zip(self.q_coeffs, self.q_bases):
            out += c * b
        return out

    @property
    def noise_params(self):
        """Banded view (q1, q2, r); q2 = 0 when a single basis is used."""
        q2 = float(self.theta[1]) if self.n_q > 1 else 0.0
        return NoiseParams(max(float(self.theta[0]), 0.0), q2, self.r)

    # -- frozen-gain sensitivity machinery ----------------------------------

    def _lyap_sum_iter(self, fbar, rhs):
        acc = rhs.copy()
        term = rhs
        scale = max(np.max(np.abs(rhs)), 1e-300)
        for _ in range(self.max_lyap_terms):
            term = fbar @ term @ fbar.T
            acc += term
            if np.max(np.abs(term)) < self.lyap_tol * scale:
                return acc
        self.truncation_count += 1
        return acc

    def _lyap_sums(self, fbar, rhs_list):
        """sum_j Fbar^j B (Fbar')^j for each B, via one eigendecomposition.

        With Fbar = V diag(l) V^-1 the sum is V [ (V^-1 B V^-T) / (1 - l_i l_k) ] V',
        shared across right-hand sides; a defective eigenvector matrix
        falls back to the direct accumulation.
        """
        try:
            evals, evecs = np.linalg.eig(fbar)
            vinv = np.linalg.inv(evecs)
            if not (np.all(np.isfinite(vinv)) and np.all(np.isfinite(evals))):
                raise np.linalg.LinAlgError
            denom = 1.0 - np.outer(evals, evals)
            if np.min(np.abs(denom)) < 1e-10:
                raise np.linalg.LinAlgError
            out = []
            for rhs in rhs_list:
                w = vinv @ rhs @ vinv.T
                s = evecs @ (w / denom) @ evecs.T
                out.append(s.real)
            return out
        except np.linalg.LinAlgError:
            return [self._lyap_sum_iter(fbar, rhs) for rhs in rhs_list]

    def _effective_transition(self, p_b, h_mat, k_gain):
        if self.transition is not None:
            return np.atleast_2d(np.asarray(self.transition, dtype=float))
        # isotropic surrogate: tr(P_b - Q) = phi^2 tr((I - K H) P_b)
        p_a = (np.eye(self.n) - k_gain @ h_mat) @ p_b
        num = max(np.trace(p_b) - np.trace(self.q_matrix()), 1e-12)
        den = max(np.trace(p_a), 1e-12)
        return math.sqrt(num / den) * np.eye(self.n)

    def _freeze(self, p_b, h_mat, k_gain):
        """Precompute the theta-linear statistics model for this cycle."""
        h_mat = np.atleast_2d(np.asarray(h_mat, dtype=float))
        p_b = np.atleast_2d(np.asarray(p_b, dtype=float))
        k_gain = np.atleast_2d(np.asarray(k_gain, dtype=float))
        m = h_mat.shape[0]
        f_dyn = self._effective_transition(p_b, h_mat, k_gain)
        fbar = f_dyn @ (np.eye(self.n) - k_gain @ h_mat)
        radius = max(np.abs(np.linalg.eigvals(fbar)))
        if radius >= self.spectral_cap:
            fbar = fbar * (self.spectral_cap / radius)
            self.truncation_count += 1

        g_r = f_dyn @ k_gain @ k_gain.T @ f_dyn.T
        p_parts = self._lyap_sums(fbar, [*self.q_bases, g_r])
        # innovation covariance pieces: C0(theta) = sum theta_j hp[j] (+ r I)
        hp = [h_mat @ p @ h_mat.T for p in p_parts]
        self._context = dict(h=h_mat, k=k_gain, f_dyn=f_dyn, fbar=fbar,
                             m=m, p_parts=p_parts, hp=hp)

    def _c0_model(self, theta):
        ctx = self._context
        c0 = sum(t * h for t, h in zip(theta, ctx["hp"]))
        return c0 + theta[-1] * np.eye(ctx["m"])

    def _lag_cov_pieces(self, ell):
        """Per-theta-component innovation product matrices C_ell_j."""
        ctx = self._context
        h_mat, k_gain = ctx["h"], ctx["k"]
        if ell == 0:
            pieces = [hp.copy() for hp in ctx["hp"]]
            pieces[-1] = pieces[-1] + np.eye(ctx["m"])
            return pieces
        m_ell = h_mat @ np.linalg.matrix_power(ctx["fbar"], ell - 1) @ ctx["f_dyn"]
        pieces = []
        for j, (p_j, hp_j) in enumerate(zip(ctx["p_parts"], ctx["hp"])):
            block = p_j @ h_mat.T - k_gain @ hp_j
            if j == self.n_q:  # r part carries the direct R term inside C0
                block = block - k_gain
            pieces.append(m_ell @ block)
        return pieces

    def pseudo_obs(self, ell):
        """Pseudo-observation (values, sensitivity rows, noise cov) at lag ell.

        The modeled entries of d_m d_{m-ell}' are the diagonal and, when
        ``include_offdiag`` is set, the cyclic first superdiagonal; their
        expectations are exactly linear in theta under the frozen-gain
        steady-state model and the noise covariance uses the Gaussian
        fourth-moment closure at the current theta.  Requires a preceding
        :meth:`update` (or :meth:`_freeze`) so the cycle context exists.
        Returns None while the buffer is cold, which callers treat as a
        skip signal.
        """
        if self._context is None:
            raise ConfigurationError("no frozen cycle context yet")
        if not self.buffer.ready(ell):
            return None
        ctx = self._context
        m = ctx["m"]
        d_now, d_lag = self.buffer.pair(ell)
        idx = np.arange(m)
        if self.include_offdiag and m > 1:
            a_idx = np.concatenate([idx, idx])
            b_idx = np.concatenate([idx, (idx + 1) % m])
        else:
            a_idx = idx
            b_idx = idx

        pieces = self._lag_cov_pieces(ell)
        values = d_now[a_idx] * d_lag[b_idx]
        rows = np.empty((values.size, self.n_q + 1))
        for j, piece in enumerate(pieces):
            rows[:, j] = piece[a_idx, b_idx]

        c0_hat = self._c0_model(self.theta)
        c_ell_hat = c0_hat if ell == 0 else \
            sum(t * piece for t, piece in zip(self.theta, pieces))
        # Cov(d_m[a] d_lag[b], d_m[c] d_lag[e]) =
        #   C0[a,c] C0_lag[b,e] + C_ell[a,e] C_ell[c,b]
        w_mat = (c0_hat[np.ix_(a_idx, a_idx)] * c0_hat[np.ix_(b_idx, b_idx)]
                 + c_ell_hat[np.ix_(a_idx, b_idx)]
                 * c_ell_hat[np.ix_(a_idx, b_idx)].T)
        return values, rows, w_mat

    # -- the secondary filter ------------------------------------------------

    def update(self, d, h_mat, p_b, k_gain, transition=None):
        """One secondary-filter cycle; returns the updated noise parameters.

        ``d`` is the current innovation; ``p_b``, ``k_gain`` the primary
        filter's current prior covariance and gain.  ``transition``
        overrides the stored dynamics matrix for this cycle.
        """
        if transition is not None:
            self.transition = transition
        self.buffer.push(d)
        self._freeze(p_b, h_mat, k_gain)
        self.cov = self.cov + np.diag(self.rw_var)  # persistence random walk

        for ell in range(self.lag):
            pseudo = self.pseudo_obs(ell)
            if pseudo is None:
                continue
            values, rows, w_mat = pseudo
            resid = values - rows @ self.theta
            s_mat = rows @ self.cov @ rows.T + w_mat
            s_mat = 0.5 * (s_mat + s_mat.T)
            try:
                gain = np.linalg.solve(s_mat, rows @ self.cov).T
            except np.linalg.LinAlgError:
                continue
            self.theta = self.theta + gain @ resid
            i_kf = np.eye(self.theta.size) - gain @ rows
            self.cov = i_kf @ self.cov @ i_kf.T + gain @ w_mat @ gain.T
            self.cov = 0.5 * (self.cov + self.cov.T)

        self._apply_constraints()
        return self.noise_params if self.n_q <= 2 else self.theta.copy()

    def _apply_constraints(self):
        if self.theta[-1] < self.r_min:
            self.theta[-1] = self.r_min
            self.clip_count += 1
        if self.projection is not None:
            new_q, clipped = self.projection(self.q_coeffs.copy())
            if clipped:
                self.clip_count += 1
            self.theta[: self.n_q] = new_q
        else:
            if np.any(self.q_coeffs < 0.0):
                self.theta[: self.n_q] = np.maximum(self.q_coeffs, 0.0)
                self.clip_count += 1


def banded_projection(q):
    """PSD guard for the banded circulant: q1 >= 0 and q1 >= 2 |q2|."""
    q1, q2 = q
    clipped = False
    if q1 < 0.0:
        q1, clipped = 0.0, True
    if abs(q2) > 0.5 * q1:
        q2, clipped = math.copysign(0.5 * q1, q2), True
    return np.array([q1, q2]), clipped


def banded_estimator(n, q1_0, q2_0, r0, **kwargs):
    """Estimator for the isotropic banded Q = q1 I + q2 (cyclic band), R = r I."""
    bases = [np.eye(n), assemble_banded_q(0.0, 1.0, n)]
    kwargs.setdefault("include_offdiag", True)
    kwargs.setdefault("projection", banded_projection)
    return AdaptiveNoiseEstimator(bases, (q1_0, q2_0), r0, **kwargs)


def diagonal_estimator(n, q0, r0, active=None, **kwargs):
    """Estimator for Q = q * diag(active mask), R = r I (q2 fixed at zero)."""
    mask = np.ones(n) if active is None else np.asarray(active, dtype=float)
    return AdaptiveNoiseEstimator([np.diag(mask)], (q0,), r0, **kwargs)


def run_adaptive_etkf_experiment(ensemble_size, n_cycles, rng, *, n=40,
                                 theta_true=1.0, theta_model=1.2, forcing=8.0,
                                 dt_obs=0.05, dt_int=0.005, r_true=1.0,
                                 q1_0=0.1, q2_0=0.0, r0=2.0, lag=2,
                                 spin_up=10.0, init_spread=1.0):
    """Twin experiment: ETKF with adaptive additive inflation on Lorenz-96.

    The truth integrates the damping coefficient ``theta_true`` while the
    forecast model uses ``theta_model``; all grid points are observed with
    true variance ``r_true`` unknown to the filter.  The banded (q1, q2)
    process covariance and the scalar observation variance r are estimated
    on-line by the secondary filter and fed back as pre-transform member
    perturbations and as the analysis R.

    Returns a dict of per-cycle arrays: q1, q2, r, rmse_state, clip_count,
    err_x10 (absolute posterior-mean error of component 10).
    """
    from . import models
    from .diagnostics import rmse
    from .kalman import Ensemble, LinearObs, etkf_analysis

    spec = models.l96_system(n, theta_true, forcing)
    x0 = forcing + 0.1 * rng.standard_normal(n)
    subsample = int(round(dt_obs / dt_int))
    traj = models.simulate_trajectory(spec, x0, t_end=n_cycles * dt_obs,
                                      h=dt_int, subsample=subsample,
                                      spin_up=spin_up)
    h_mat = np.eye(n)
    _, obs = models.generate_observations(traj, h_mat, r_true * np.eye(n),
                                          dt_obs, rng)
    truth = traj.states[1:]

    est = banded_estimator(n, q1_0, q2_0, r0, lag=lag)
    members = traj.states[0] + init_spread * rng.standard_normal(
        (ensemble_size, n))
    drift = lambda s, t: models.l96_drift(s, theta_model, forcing)

    out = {k: np.empty(n_cycles) for k in
           ("q1", "q2", "r", "rmse_state", "clip_count", "err_x10")}
    for m in range(n_cycles):
        for step in range(subsample):
            members = models.rk4_step(drift, members, m * dt_obs
                                      + step * dt_int, dt_int)
        q_mat = est.q_matrix()
        members = members + _sample_psd_rows(q_mat, ensemble_size, rng)
        ens = Ensemble(members)
        p_b = ens.cov()
        r_hat = est.r
        d = innovation(obs[m], ens.mean(), h_mat)
        k_gain = p_b @ np.linalg.solve(p_b + r_hat * np.eye(n), np.eye(n))
        ens = etkf_analysis(ens, obs[m], LinearObs(h_mat, r_hat * np.eye(n)))
        members = ens.members
        est.update(d, h_mat, p_b, k_gain)
        post_mean = members.mean(axis=0)
        out["q1"][m], out["q2"][m] = est.theta[0], est.theta[1]
        out["r"][m] = est.r
        out["rmse_state"][m] = rmse(post_mean, truth[m])
        out["clip_count"][m] = est.clip_count
        out["err_x10"][m] = abs(post_mean[10] - truth[m][10])
    return out


def _sample_psd_rows(cov, size, rng):
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    root = v * np.sqrt(np.clip(w, 0.0, None))
    return rng.standard_normal((size, cov.shape[0])) @ root.T
