"""Offline and online stochastic parameterization of a subgrid closure.

The truth is the two-layer Lorenz-96 system; the available model is the
single-layer ring.  The missing fast feedback is represented either by
an offline fit (finite-difference residuals regressed on a cubic
polynomial, with an AR(1) model for what remains) or by an online fit
(a linear damping whose coefficient rides in the ETKF state vector
while the adaptive machinery estimates the white-noise amplitude and
the observation error variance on the fly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import models
from .adaptive import AdaptiveNoiseEstimator, innovation
from .diagnostics import acf, density1d, rmse
from .errors import ConfigurationError, FilterDivergence, IntegrationBlowup
from .kalman import Ensemble, LinearObs, etkf_analysis

DEFAULT_FORCING = 20.0


@dataclass(frozen=True)
class OfflineFit:
    """Cubic-polynomial closure coefficients plus the AR(1) residual model.

    The polynomial enters the closure as -zeta - alpha x - beta x^2
    - gamma x^3; ``phi`` is the lag-one coefficient of the remaining
    residual and ``sigma_hat`` its stationary standard deviation.
    """

    zeta: float
    alpha: float
    beta: float
    gamma: float
    phi: float
    sigma_hat: float

    def __post_init__(self):
        if abs(self.phi) >= 1.0:
            raise ConfigurationError("AR(1) coefficient must satisfy |phi| < 1")
        if self.sigma_hat < 0:
            raise ConfigurationError("noise amplitude must be nonnegative")

    def closure(self, x):
        return -(self.zeta + self.alpha * x + self.beta * x ** 2
                 + self.gamma * x ** 3)


def residual_series(slow_traj, dt, forcing=DEFAULT_FORCING):
    """Finite-difference closure residuals of the single-layer model.

    r_i(t) = (x_i(t+dt) - x_i(t))/dt - [x_{i-1}(x_{i+1} - x_{i-2}) - x_i + F]
    evaluated at every sample but the last.  Returns (residuals, states)
    with matching shapes (T-1, n).
    """
    x = np.asarray(slow_traj, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigurationError("need a (time, sites) trajectory of length >= 2")
    fd = (x[1:] - x[:-1]) / dt
    return fd - models.l96_drift(x[:-1], 1.0, forcing), x[:-1]


def fit_cubic_ar1(residuals, states, constrained=False):
    """Pooled least squares for the cubic closure and its AR(1) residual.

    Sites are pooled (the ring is statistically homogeneous).  With
    ``constrained=True`` only the linear damping is fit (zeta, beta,
    gamma and phi forced to zero) and the noise amplitude is the raw
    residual standard deviation.  ``sigma_hat`` matches the stationary
    standard deviation of the AR(1) residual in both cases.
    """
    r = np.asarray(residuals, dtype=float)
    x = np.asarray(states, dtype=float)
    if r.shape != x.shape:
        raise ConfigurationError("residuals and states must be paired")
    # rows are time, columns are sites; flat series count as one site
    r2 = r[:, None] if r.ndim == 1 else r
    x2 = x[:, None] if x.ndim == 1 else x
    flat_r = r2.reshape(-1)
    flat_x = x2.reshape(-1)

    if constrained:
        design = -flat_x[:, None]
        coef, _, rank, _ = np.linalg.lstsq(design, flat_r, rcond=None)
        if rank < 1:
            raise ConfigurationError("rank-deficient design")
        alpha = float(coef[0])
        resid = r2 + alpha * x2
        return OfflineFit(0.0, alpha, 0.0, 0.0, 0.0, float(resid.std()))

    design = -np.column_stack([np.ones_like(flat_x), flat_x,
                               flat_x ** 2, flat_x ** 3])
    coef, _, rank, _ = np.linalg.lstsq(design, flat_r, rcond=None)
    if rank < 4:
        raise ConfigurationError("rank-deficient design")
    zeta, alpha, beta, gamma = (float(c) for c in coef)
    resid = r2 - (design @ coef).reshape(r2.shape)
    # pooled lag-one regression over sites, no intercept
    num = float(np.sum(resid[1:] * resid[:-1]))
    den = float(np.sum(resid[:-1] ** 2))
    phi = num / den if den > 0 else 0.0
    if abs(phi) >= 1.0:
        raise ConfigurationError("nonstationary AR(1) fit (|phi| >= 1)")
    sigma_hat = float(resid.std())
    return OfflineFit(zeta, alpha, beta, gamma, phi, sigma_hat)


# ---------------------------------------------------------------------------
# twin-experiment filters
# ---------------------------------------------------------------------------

def observation_operator(n_slow=8, stride=2, n_aug=0):
    """H selecting every ``stride``-th slow site, zero-padded for parameters."""
    obs_sites = np.arange(0, n_slow, stride)
    h_mat = np.zeros((obs_sites.size, n_slow + n_aug))
    h_mat[np.arange(obs_sites.size), obs_sites] = 1.0
    return h_mat


def _forecast_members(members, alpha, dt, h_int, forcing, t0=0.0):
    """RK4 member propagation of the damped single-layer closure."""
    drift = lambda s, t: models.l96_drift(s, 1.0, forcing) - alpha * s
    n_sub = int(round(dt / h_int))
    for i in range(n_sub):
        members = models.rk4_step(drift, members, t0 + i * h_int, h_int)
    return members


def damped_l96_tangent(xbar, alpha, dt, n_aug=0):
    """One-cycle tangent-linear transition of the damped ring at ``xbar``.

    expm(J dt) with J the Jacobian of the closure drift; the optional
    trailing parameter block is frozen (identity) apart from the state's
    sensitivity to alpha (d drift_i / d alpha = -x_i).  Used by the
    adaptive estimator, whose innovation-statistics model needs the
    dynamics factor; the isotropic trace surrogate is badly biased for
    chaotic advection.
    """
    from scipy.linalg import expm

    x = np.asarray(xbar, dtype=float)
    n = x.size
    idx = np.arange(n)
    jac = np.zeros((n + n_aug, n + n_aug))
    xp1 = np.roll(x, -1)
    xm1 = np.roll(x, 1)
    xm2 = np.roll(x, 2)
    jac[idx, (idx - 1) % n] += xp1 - xm2
    jac[idx, (idx + 1) % n] += xm1
    jac[idx, (idx - 2) % n] += -xm1
    jac[idx, idx] += -(1.0 + alpha)
    if n_aug:
        jac[idx, n] = -x  # sensitivity of the drift to alpha
    return expm(jac * dt)


def online_fit_filter(truth_slow, obs_values, dt_obs, rng, *,
                      forcing=DEFAULT_FORCING, n_members=18, h_int=0.005,
                      q1_0=0.3, r0=0.25, alpha_walk_std=0.02,
                      init_spread=1.0, alpha0_std=0.5, discard=100,
                      divergence_factor=10.0, inflation=1.1,
                      transition_mode="surrogate"):
    """Augmented ETKF that learns the damping alpha and noise levels online.

    ``truth_slow`` holds the true slow states at analysis times (row 0 is
    the initial time, rows 1.. match ``obs_values``).  The 9-dim state is
    (8 slow sites, alpha); the adaptive estimator supplies the additive
    process variance q1 on the slow block (reported as the continuous
    amplitude sigma_hat = sqrt(q1/dt)) and the observation variance r.

    Returns a dict with per-cycle traces, time-mean parameter estimates
    over the second half, and the posterior-mean RMSE after ``discard``.
    """
    truth = np.asarray(truth_slow, dtype=float)
    obs_values = np.asarray(obs_values, dtype=float)
    n_cycles, n_slow = obs_values.shape[0], truth.shape[1]
    h_mat = observation_operator(n_slow, 2, n_aug=1)
    n_aug = n_slow + 1

    est = AdaptiveNoiseEstimator(
        [np.diag(np.concatenate([np.ones(n_slow), [0.0]]))],
        (q1_0,), r0, lag=2, include_offdiag=False)

    members = np.empty((n_members, n_aug))
    members[:, :n_slow] = truth[0] + init_spread * rng.standard_normal(
        (n_members, n_slow))
    members[:, n_slow] = alpha0_std * rng.standard_normal(n_members)

    clim_spread = truth.std()
    alpha_tr = np.empty(n_cycles)
    q1_tr = np.empty(n_cycles)
    r_tr = np.empty(n_cycles)
    rmse_tr = np.empty(n_cycles)
    diverged_run = 0
    for m in range(n_cycles):
        alpha_m = members[:, n_slow:]
        members = np.concatenate(
            [_forecast_members(members[:, :n_slow], alpha_m, dt_obs, h_int,
                               forcing, t0=m * dt_obs), alpha_m], axis=1)
        # parameter random walk keeps the augmented spread alive
        members[:, n_slow] += alpha_walk_std * math.sqrt(dt_obs) * \
            rng.standard_normal(n_members)
        # additive process noise on the slow block only
        q1 = max(est.theta[0], 0.0)
        members[:, :n_slow] += math.sqrt(q1) * rng.standard_normal(
            (n_members, n_slow))
        ens = Ensemble(members)
        p_b = ens.cov()
        r_hat = est.r
        d = innovation(obs_values[m], ens.mean(), h_mat)
        s_inv = np.linalg.solve(h_mat @ p_b @ h_mat.T
                                + r_hat * np.eye(h_mat.shape[0]),
                                np.eye(h_mat.shape[0]))
        k_gain = p_b @ h_mat.T @ s_inv
        ens = etkf_analysis(ens, obs_values[m],
                            LinearObs(h_mat, r_hat * np.eye(h_mat.shape[0])),
                            inflation=inflation)
        members = ens.members
        if transition_mode == "tangent":
            # exact model tangent: right when the forecast model is the
            # truth (twin controls); under large model error the
            # covariance-calibrated isotropic surrogate is more robust
            mean_state = members.mean(axis=0)
            transition = damped_l96_tangent(
                mean_state[:n_slow], mean_state[n_slow], dt_obs, n_aug=1)
            est.update(d, h_mat, p_b, k_gain, transition=transition)
        else:
            est.update(d, h_mat, p_b, k_gain)

        post_mean = members.mean(axis=0)
        alpha_tr[m] = post_mean[n_slow]
        q1_tr[m] = est.theta[0]
        r_tr[m] = est.r
        rmse_tr[m] = rmse(post_mean[:n_slow], truth[m + 1])
        if rmse_tr[m] > divergence_factor * clim_spread:
            diverged_run += 1
            if diverged_run >= 100:
                raise FilterDivergence(
                    f"online filter diverged around cycle {m}")
        else:
            diverged_run = 0

    half = slice(n_cycles // 2, None)
    return dict(
        alpha=alpha_tr, q1=q1_tr, r=r_tr, rmse_trace=rmse_tr,
        alpha_mean=float(alpha_tr[half].mean()),
        sigma_hat=float(np.sqrt(max(q1_tr[half].mean(), 0.0) / dt_obs)),
        r_mean=float(r_tr[half].mean()),
        rmse=float(rmse_tr[discard:].mean()),
    )


def offline_filter(truth_slow, obs_values, dt_obs, fit, rng, *,
                   forcing=DEFAULT_FORCING, n_members=18, h_int=0.005,
                   r_true=0.1, init_spread=1.0, discard=100,
                   linear_only=True, divergence_factor=10.0,
                   inflation=1.1):
    """ETKF with the offline closure: fixed damping, in-forecast noise.

    ``linear_only`` uses just the fitted damping term (the offline model);
    with it disabled the full cubic closure plus AR(1) residual drives the
    forecast (the Cubic+AR(1) model).  The observation error covariance
    is known here, unlike in the online filter.
    """
    truth = np.asarray(truth_slow, dtype=float)
    obs_values = np.asarray(obs_values, dtype=float)
    n_cycles, n_slow = obs_values.shape[0], truth.shape[1]
    h_mat = observation_operator(n_slow, 2)
    lin = LinearObs(h_mat, r_true * np.eye(h_mat.shape[0]))

    members = truth[0] + init_spread * rng.standard_normal((n_members, n_slow))
    ar_state = np.zeros((n_members, n_slow))
    n_sub = int(round(dt_obs / h_int))
    sq_h = math.sqrt(h_int)
    clim_spread = truth.std()

    if linear_only:
        drift = lambda s, t: models.l96_drift(s, 1.0, forcing) - fit.alpha * s
        noise_amp = fit.sigma_hat
    else:
        drift = lambda s, t: models.l96_drift(s, 1.0, forcing) + fit.closure(s)
        noise_amp = fit.sigma_hat * math.sqrt(max(1.0 - fit.phi ** 2, 0.0))

    rmse_tr = np.empty(n_cycles)
    diverged_run = 0
    for m in range(n_cycles):
        for i in range(n_sub):
            members = models.rk4_step(drift, members, m * dt_obs + i * h_int,
                                      h_int)
            if linear_only:
                members = members + noise_amp * sq_h * rng.standard_normal(
                    members.shape)
            else:
                ar_state = fit.phi * ar_state + noise_amp * \
                    rng.standard_normal(members.shape)
                members = members + h_int * ar_state
        ens = etkf_analysis(Ensemble(members), obs_values[m], lin,
                            inflation=inflation)
        members = ens.members
        rmse_tr[m] = rmse(members.mean(axis=0), truth[m + 1])
        if rmse_tr[m] > divergence_factor * clim_spread:
            diverged_run += 1
            if diverged_run >= 100:
                raise FilterDivergence(
                    f"offline filter diverged around cycle {m}")
        else:
            diverged_run = 0
    return dict(rmse_trace=rmse_tr, rmse=float(rmse_tr[discard:].mean()))


# ---------------------------------------------------------------------------
# climatology
# ---------------------------------------------------------------------------

def reduced_free_run(alpha, sigma, t_end, h, rng, *, n_slow=8,
                     forcing=DEFAULT_FORCING, n_batch=8, spin_up=10.0,
                     subsample=1, fit=None):
    """Free run of a parameterized single-layer model, batched.

    With ``fit`` given the full cubic + AR(1) closure is integrated
    (finite-time blowup is a legitimate outcome and propagates as
    :class:`IntegrationBlowup`); otherwise the linear damping ``alpha``
    plus white noise of amplitude ``sigma`` drives the run.  Returns the
    pooled states with shape (batch, n_samples, n_slow).
    """
    if fit is None:
        drift = lambda s, t: models.l96_drift(s, 1.0, forcing) - alpha * s
        noise_amp = sigma
    else:
        drift = lambda s, t: models.l96_drift(s, 1.0, forcing) + fit.closure(s)
        noise_amp = None
    state = forcing / 4.0 + rng.standard_normal((n_batch, n_slow))
    ar_state = np.zeros((n_batch, n_slow))
    sq_h = math.sqrt(h)
    n_spin = int(round(spin_up / h))
    n_steps = int(round(t_end / h))
    out = np.empty((n_batch, n_steps // subsample + 1, n_slow))
    k = 0
    for i in range(n_spin + n_steps):
        state = models.rk4_step(drift, state, i * h, h)
        if fit is None:
            state = state + noise_amp * sq_h * rng.standard_normal(state.shape)
        else:
            ar_state = fit.phi * ar_state + fit.sigma_hat * math.sqrt(
                max(1.0 - fit.phi ** 2, 0.0)) * rng.standard_normal(state.shape)
            state = state + h * ar_state
        if not np.all(np.isfinite(state)):
            raise IntegrationBlowup(i * h)
        if i == n_spin - 1:
            out[:, 0] = state
            k = 1
        elif i >= n_spin and (i - n_spin + 1) % subsample == 0:
            out[:, k] = state
            k += 1
    return out[:, :k]


def free_run_climatology(variant, t_long, rng, *, alpha=None, sigma=None,
                         fit=None, forcing=DEFAULT_FORCING, n_batch=8,
                         h_truth=1e-3, dt_sample=0.005, grid=None,
                         max_lag_time=4.0):
    """Equilibrium density and autocorrelation of a long free run.

    ``variant``: "full" integrates the two-layer truth (slow block
    reported); "reduced" integrates the linear-damping closure with the
    given (alpha, sigma); "cubic_ar1" integrates the cubic closure with
    its AR(1) residual, whose finite-time blowup propagates as
    :class:`IntegrationBlowup` (a legitimate reportable outcome).
    Returns (grid, pdf, lags, acf).
    """
    if variant == "full":
        spec = models.l96_two_layer_system(forcing=forcing)
        z0 = np.concatenate(
            [forcing + rng.standard_normal((n_batch, spec.dim_slow)),
             0.1 * rng.standard_normal((n_batch, spec.dim_fast))], axis=1)
        run = models.simulate_batch(spec, z0, t_end=t_long, h=h_truth,
                                    subsample=int(round(dt_sample / h_truth))
                                    )[:, :, : spec.dim_slow]
    elif variant == "reduced":
        if alpha is None or sigma is None:
            raise ConfigurationError("reduced variant needs alpha and sigma")
        run = reduced_free_run(alpha, sigma, t_long, dt_sample, rng,
                               forcing=forcing, n_batch=n_batch)
    elif variant == "cubic_ar1":
        if fit is None:
            raise ConfigurationError("cubic_ar1 variant needs the fit")
        run = reduced_free_run(0.0, 0.0, t_long, dt_sample, rng,
                               forcing=forcing, n_batch=n_batch, fit=fit)
    else:
        raise ConfigurationError(f"unknown climatology variant {variant!r}")
    return climatology_tables(run, dt_sample, grid=grid,
                              max_lag_time=max_lag_time)


def climatology_tables(series_batch, dt_sample, *, grid=None, bins=120,
                       max_lag_time=4.0):
    """Pooled site density and mean autocorrelation of a batched run."""
    batch = np.asarray(series_batch, dtype=float)
    pooled = batch.reshape(-1)
    grid, pdf = density1d(pooled, method="histogram", grid=grid, bins=bins)
    n_samples = batch.shape[1]
    max_lag = min(int(round(max_lag_time / dt_sample)), (n_samples - 1) // 10)
    rows = []
    for traj in batch:
        for site in range(traj.shape[1]):
            rows.append(acf(traj[:, site], max_lag))
    return grid, pdf, dt_sample * np.arange(max_lag + 1), np.mean(rows, axis=0)


DEFAULT_SWEEP = (0.05, 0.1, 0.2)


def run_stoch_param_experiment(seed, *, forcing=DEFAULT_FORCING,
                               fit_batch=6, fit_t=40.0,
                               sweep=DEFAULT_SWEEP, n_cycles=600,
                               inflation=1.1, clim_batch=40, clim_t=100.0,
                               r_true=0.1, h_truth=1e-3, dt_sample=0.005):
    """Example-style subgrid parameterization study at desk scale.

    Runs, in order: the offline fits on a batch of two-layer truth runs,
    the online/offline filtering sweep over observation intervals, and
    the free-run climatology comparison (full model, online and offline
    reduced models, plus the cubic+AR(1) model whose finite-time blowup
    is a legitimate reportable outcome).
    """
    from .util import substream

    spec = models.l96_two_layer_system(forcing=forcing)
    subsample = int(round(dt_sample / h_truth))
    n_slow = spec.dim_slow
    n_fast = spec.dim_fast

    # offline fits
    rng = substream(seed, "ex3", "fit-truth")
    z0 = np.concatenate([forcing + rng.standard_normal((fit_batch, n_slow)),
                         0.1 * rng.standard_normal((fit_batch, n_fast))], axis=1)
    batch = models.simulate_batch(spec, z0, t_end=fit_t, h=h_truth,
                                  subsample=subsample)
    resids, states = [], []
    for traj in batch:
        r, x = residual_series(traj[:, :n_slow], dt_sample, forcing)
        resids.append(r)
        states.append(x)
    resids = np.concatenate(resids)
    states = np.concatenate(states)
    fit_full = fit_cubic_ar1(resids, states)
    fit_con = fit_cubic_ar1(resids, states, constrained=True)

    # filtering sweep: one truth member per observation interval
    rng = substream(seed, "ex3", "filter-truth")
    t_max = max(dt * n_cycles for dt in sweep)
    z0 = np.concatenate([forcing + rng.standard_normal((len(sweep), n_slow)),
                         0.1 * rng.standard_normal((len(sweep), n_fast))],
                        axis=1)
    truth_batch = models.simulate_batch(spec, z0, t_end=t_max, h=h_truth,
                                        subsample=subsample)
    h_mat = observation_operator(n_slow, 2)
    sweep_rows = []
    online_params = None
    for j, dt_obs in enumerate(sweep):
        stride = int(round(dt_obs / dt_sample))
        truth_seg = truth_batch[j, ::stride][: n_cycles + 1, :n_slow]
        clean = truth_seg[1:] @ h_mat.T
        obs_rng = substream(seed, "ex3", "obs", dt_obs)
        obs = clean + math.sqrt(r_true) * obs_rng.standard_normal(clean.shape)
        discard = min(100, n_cycles // 4)
        on = online_fit_filter(truth_seg, obs, dt_obs,
                               substream(seed, "ex3", "online", dt_obs),
                               forcing=forcing, inflation=inflation,
                               discard=discard)
        off = offline_filter(truth_seg, obs, dt_obs, fit_con,
                             substream(seed, "ex3", "offline", dt_obs),
                             forcing=forcing, r_true=r_true,
                             inflation=inflation, discard=discard)
        sweep_rows.append(dict(dt_obs=dt_obs, rmse_online=on["rmse"],
                               rmse_offline=off["rmse"],
                               alpha_online=on["alpha_mean"],
                               sigma_online=on["sigma_hat"],
                               r_online=on["r_mean"]))
        if j == 0:
            online_params = (on["alpha_mean"], on["sigma_hat"])
            online_trace = on

    # climatology
    rng = substream(seed, "ex3", "clim-truth")
    z0 = np.concatenate([forcing + rng.standard_normal((clim_batch, n_slow)),
                         0.1 * rng.standard_normal((clim_batch, n_fast))],
                        axis=1)
    full_batch = models.simulate_batch(spec, z0, t_end=clim_t, h=h_truth,
                                       subsample=subsample)[:, :, :n_slow]
    grid, full_pdf, lags, full_acf = climatology_tables(full_batch, dt_sample)
    on_run = reduced_free_run(online_params[0], online_params[1], clim_t,
                              dt_sample, substream(seed, "ex3", "free-online"),
                              forcing=forcing, n_batch=clim_batch)
    _, on_pdf, _, on_acf = climatology_tables(on_run, dt_sample, grid=grid)
    off_run = reduced_free_run(fit_con.alpha, fit_con.sigma_hat, clim_t,
                               dt_sample,
                               substream(seed, "ex3", "free-offline"),
                               forcing=forcing, n_batch=clim_batch)
    _, off_pdf, _, off_acf = climatology_tables(off_run, dt_sample, grid=grid)
    cubic_blowup = None
    cubic_pdf = None
    cubic_acf = None
    try:
        cubic_run = reduced_free_run(0.0, 0.0, clim_t, dt_sample,
                                     substream(seed, "ex3", "free-cubic"),
                                     forcing=forcing, n_batch=8, fit=fit_full)
        _, cubic_pdf, _, cubic_acf = climatology_tables(cubic_run, dt_sample,
                                                        grid=grid)
    except IntegrationBlowup as exc:
        cubic_blowup = float(exc.time)

    return dict(
        fit_full=fit_full, fit_constrained=fit_con, sweep=sweep_rows,
        online_trace=online_trace,
        clim=dict(grid=grid, lags=lags, full_pdf=full_pdf, full_acf=full_acf,
                  online_pdf=on_pdf, online_acf=on_acf, offline_pdf=off_pdf,
                  offline_acf=off_acf, cubic_pdf=cubic_pdf,
                  cubic_acf=cubic_acf, cubic_blowup=cubic_blowup),
    )
