"""Semiparametric forecasting: parametric ring, nonparametric parameter.

The truth couples a 40-site advection-scaled Lorenz-96 ring to a hidden
Lorenz-63 triple through the scalar theta = x_l63 / 40 + 1.  The
parametric structure f(x, theta) is known; theta's dynamics are not.
The pipeline extracts a theta time series from noisy observations of
the ring (augmented ETKF with a white-noise theta and adaptively
estimated drive/observation variances), trains a diffusion forecast
model on the extracted series, and couples the two by drawing each
ensemble member's theta from the evolving nonparametric density during
the forecast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffusion, models
from .adaptive import AdaptiveNoiseEstimator, innovation
from .diagnostics import climatological_error
from .errors import ConfigurationError, FilterDivergence
from .kalman import Ensemble, GaussianBelief, LinearObs, etkf_analysis

N_RING = 40
FORCING = 8.0


def coupled_truth_drift(z, forcing=FORCING):
    """Drift of the joint (ring, hidden Lorenz-63) truth system."""
    x = z[..., :N_RING]
    hidden = z[..., N_RING:]
    theta = hidden[..., 0] / 40.0 + 1.0
    dx = models.l96_theta_advection_drift(x, theta, forcing)
    dh = models.l63_drift(hidden)
    return np.concatenate([dx, dh], axis=-1)


def simulate_coupled_truth(t_end, h, subsample, rng, spin_up=10.0):
    """Truth trajectory of the coupled system; returns (states, theta)."""
    z0 = np.concatenate([forcing_start(rng), [1.0, 1.0, 25.0]])
    state = z0
    drift = lambda s, t: coupled_truth_drift(s)
    for i in range(int(round(spin_up / h))):
        state = models.rk4_step(drift, state, i * h, h)
    n_steps = int(round(t_end / h))
    out = np.empty((n_steps // subsample + 1, N_RING + 3))
    out[0] = state
    k = 1
    for i in range(1, n_steps + 1):
        state = models.rk4_step(drift, state, i * h, h)
        if i % subsample == 0:
            out[k] = state
            k += 1
    theta = out[:, N_RING] / 40.0 + 1.0
    return out[:k], theta[:k]


def forcing_start(rng):
    return FORCING + 0.5 * rng.standard_normal(N_RING)


def extract_parameter_series(obs_values, dt_obs, rng, *, n_members=86,
                             h_int=0.005, r0=0.25, q_theta0=0.01,
                             theta0=1.0, theta0_std=0.3, init_state=None,
                             init_spread=1.0, forcing=FORCING,
                             inflation=1.05, divergence_limit=50.0):
    """Posterior-mean theta series from ring observations.

    Runs the augmented ETKF over (40 ring sites, theta) with theta driven
    by white noise whose variance comes from the adaptive estimator along
    with the observation variance.  Returns a dict with the theta series,
    its posterior standard deviations, and the noise-parameter traces.
    """
    obs_values = np.asarray(obs_values, dtype=float)
    n_cycles = obs_values.shape[0]
    n_aug = N_RING + 1
    h_mat = np.zeros((N_RING, n_aug))
    h_mat[:, :N_RING] = np.eye(N_RING)

    est = AdaptiveNoiseEstimator(
        [np.diag(np.concatenate([np.zeros(N_RING), [1.0]]))],
        (q_theta0,), r0, lag=2, include_offdiag=False)

    members = np.empty((n_members, n_aug))
    start = obs_values[0] if init_state is None else init_state
    members[:, :N_RING] = start + init_spread * rng.standard_normal(
        (n_members, N_RING))
    members[:, N_RING] = theta0 + theta0_std * rng.standard_normal(n_members)

    theta_mean = np.empty(n_cycles)
    theta_std = np.empty(n_cycles)
    q_trace = np.empty(n_cycles)
    r_trace = np.empty(n_cycles)
    n_sub = int(round(dt_obs / h_int))

    for m in range(n_cycles):
        theta_m = members[:, N_RING]
        x_part = members[:, :N_RING]
        drift = lambda s, t: models.l96_theta_advection_drift(
            s, theta_m, forcing)
        for i in range(n_sub):
            x_part = models.rk4_step(drift, x_part, m * dt_obs + i * h_int,
                                     h_int)
        members = np.column_stack([x_part, theta_m])
        # white-noise parameter drive with the adaptive variance
        q_theta = max(est.theta[0], 1e-8)
        members[:, N_RING] += math.sqrt(q_theta) * rng.standard_normal(
            n_members)
        ens = Ensemble(members)
        p_b = ens.cov()
        r_hat = est.r
        d = innovation(obs_values[m], ens.mean(), h_mat)
        s_mat = h_mat @ p_b @ h_mat.T + r_hat * np.eye(N_RING)
        k_gain = p_b @ h_mat.T @ np.linalg.solve(s_mat, np.eye(N_RING))
        ens = etkf_analysis(ens, obs_values[m],
                            LinearObs(h_mat, r_hat * np.eye(N_RING)),
                            inflation=inflation)
        members = ens.members
        est.update(d, h_mat, p_b, k_gain)
        theta_mean[m] = members[:, N_RING].mean()
        theta_std[m] = members[:, N_RING].std()
        q_trace[m] = est.theta[0]
        r_trace[m] = est.r
        if not np.isfinite(theta_mean[m]) or abs(theta_mean[m]) > divergence_limit:
            raise FilterDivergence(f"theta extraction diverged at cycle {m}")
    return dict(theta=theta_mean, theta_std=theta_std, q_theta=q_trace,
                r=r_trace)


# ---------------------------------------------------------------------------
# coupled ensemble forecasting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThetaModel:
    """Trained nonparametric theta model plus its physical guard box.

    The basis lives on delay-embedded vectors (theta_t, theta_{t-d}, ...)
    so the scalar projection of the hidden dynamics becomes approximately
    Markovian; sampled points expose theta as their first coordinate.
    """

    basis: diffusion.DiffusionBasis
    shift: diffusion.ShiftOperator
    box: tuple
    n_delays: int = 1
    delay_samples: int = 1

    @property
    def tau(self):
        return self.shift.tau


def delay_embed(series, n_delays, delay_samples):
    """Columns (x_t, x_{t-d}, ..., x_{t-(m-1)d}), newest first."""
    series = np.asarray(series, dtype=float)
    span = (n_delays - 1) * delay_samples
    n = series.size - span
    if n < 2:
        raise ConfigurationError("series too short for the requested embedding")
    return np.column_stack([series[span - k * delay_samples:
                                   span - k * delay_samples + n]
                            for k in range(n_delays)])


def train_theta_model(theta_series, dt_series, n_modes=25, bandwidth=None,
                      box_inflation=0.1, n_delays=3, delay_samples=3,
                      subsample=2):
    """Diffusion basis and shift operator for the extracted theta series.

    The series (sampled every ``dt_series``) is delay embedded and then
    thinned by ``subsample`` so one shift-operator step spans
    ``subsample * dt_series``, keeping the one-step decay signal above
    the Monte-Carlo noise floor of the operator estimate.
    """
    series = np.asarray(theta_series, dtype=float)
    embedded = delay_embed(series, n_delays, delay_samples)[::subsample]
    basis = diffusion.build_basis(embedded, n_modes=n_modes,
                                  bandwidth=bandwidth)
    shift = diffusion.build_shift_operator(basis, dt_series * subsample)
    lo, hi = float(series.min()), float(series.max())
    pad = box_inflation * (hi - lo)
    return ThetaModel(basis, shift, (lo - pad, hi + pad), n_delays,
                      delay_samples)


def launch_density_coeffs(theta_model, recent_theta, spread):
    """Project a Gaussian launch bump onto the embedded basis.

    ``recent_theta`` holds the newest extraction estimates, newest last;
    the bump centers on (theta_t, theta_{t-d}, ...) with isotropic
    standard deviation ``spread``.
    """
    m = theta_model.n_delays
    d = theta_model.delay_samples
    recent = np.asarray(recent_theta, dtype=float)
    center = [recent[-1 - k * d] for k in range(m)]
    bump = diffusion.gaussian_bump_values(
        theta_model.basis, center, max(spread, 1e-3) ** 2 * np.eye(m))
    return diffusion.project_density(bump, theta_model.basis)


def couple_forecast(members0, theta_model, coeffs0, horizon, rng, *,
                    h_int=0.005, forcing=FORCING, record_every=None,
                    theta_series=None):
    """Ensemble forecast of the ring with nonparametrically sampled theta.

    Every tau the density coefficients advance one shift-operator step
    and each member draws a fresh theta (held constant in between, and
    clipped to the model's guard box with a count).  With
    ``theta_series`` given, all members instead follow that prescribed
    theta path (the perfect-parameter oracle mode used in tests).

    Returns (trace, clip_count): trace has shape (n_records + 1, k, 40)
    including the initial ensemble.
    """
    members = np.array(members0, dtype=float)
    if members.ndim != 2 or members.shape[1] != N_RING:
        raise ConfigurationError("members must be (k, 40)")
    tau = theta_model.tau
    steps_per_tau = int(round(tau / h_int))
    n_blocks = int(round(horizon / tau))
    if record_every is None:
        record_every = 1
    coeffs = np.asarray(coeffs0, dtype=float).copy()
    lo, hi = theta_model.box
    clip_count = 0

    trace = [members.copy()]
    for block in range(n_blocks):
        if theta_series is not None:
            theta = np.full(members.shape[0], theta_series[block])
        else:
            theta = diffusion.sample_density(coeffs, theta_model.basis,
                                             members.shape[0], rng)[:, 0]
        clipped = np.clip(theta, lo, hi)
        clip_count += int(np.sum(clipped != theta))
        theta = clipped
        drift = lambda s, t: models.l96_theta_advection_drift(s, theta, forcing)
        for i in range(steps_per_tau):
            members = models.rk4_step(drift, members,
                                      block * tau + i * h_int, h_int)
        coeffs = theta_model.shift.matrix @ coeffs
        if (block + 1) % record_every == 0:
            trace.append(members.copy())
    return np.array(trace), clip_count


def _batched_forecast_rmse(variant, launches, truth_x, leads, dt_obs, h_int,
                           theta_model=None, coeffs0=None, rng=None):
    """Pooled per-member squared errors for one variant over all launches.

    ``launches`` is (L, K, dim) with dim 40 (ring variants) or 43
    (perfect model); launches and members flatten into one batch so the
    integrator amortizes over L*K states.
    """
    n_launch, n_members, dim = launches.shape
    members = launches.reshape(n_launch * n_members, dim)
    stride_rec = int(round((leads[1] - leads[0]) / dt_obs))
    steps_per_block = int(round(dt_obs / h_int))
    n_blocks = int(round(leads[-1] / dt_obs))
    sq = np.zeros(len(leads))
    theta = None
    if coeffs0 is not None:
        coeffs = np.array(coeffs0, dtype=float)   # (L, M)
        lo, hi = theta_model.box
        theta_stride = max(int(round(theta_model.tau / dt_obs)), 1)

    rec = 0
    for block in range(n_blocks + 1):
        if block % stride_rec == 0:
            ring = members[:, :N_RING].reshape(n_launch, n_members, N_RING)
            diff = ring - truth_x[:, rec][:, None, :]
            sq[rec] = np.mean(diff ** 2)
            rec += 1
        if block == n_blocks:
            break
        if variant == "perfect":
            drift = lambda s, t: coupled_truth_drift(s)
        elif variant == "l96":
            drift = lambda s, t: models.l96_drift(s, 1.0, FORCING)
        else:
            if block % theta_stride == 0:
                if block > 0:
                    coeffs = coeffs @ theta_model.shift.matrix.T
                draw = np.empty((n_launch, n_members))
                for j in range(n_launch):
                    draw[j] = diffusion.sample_density(
                        coeffs[j], theta_model.basis, n_members, rng)[:, 0]
                theta = np.clip(draw.reshape(-1), lo, hi)
            drift = lambda s, t: models.l96_theta_advection_drift(
                s, theta, FORCING)
        for i in range(steps_per_block):
            members = models.rk4_step(drift, members, 0.0, h_int)
    return np.sqrt(sq)


# ---------------------------------------------------------------------------
# the forecast-skill experiment
# ---------------------------------------------------------------------------

def run_semiparam_experiment(seed, *, n_train=5000, dt_obs=0.05,
                             horizon=10.0, lead_step=0.25, n_launches=100,
                             n_members=86, n_modes=25, h_int=0.005,
                             r_true=0.1, init_spread=0.5,
                             hidden_init_spread=2.0, launch_stride=10,
                             n_delays=3, delay_samples=3, theta_subsample=2):
    """Forecast-skill comparison: perfect model vs semiparametric vs ring-only.

    A single long truth run provides the extraction/training segment and
    the forecast-verification segment.  RMSE curves are per-member
    (pooled over members, components and launches), so they saturate at
    the climatological error of two independent draws; launches integrate
    as one batch per variant.

    Returns a dict with the lead grid, one RMSE curve per variant, the
    climatological baseline, extraction diagnostics and the trained
    theta model.
    """
    from .util import substream

    rng_truth = substream(seed, "ex7", "truth")
    subsample = int(round(dt_obs / h_int))
    t_train = n_train * dt_obs
    t_verify = (n_launches * launch_stride) * dt_obs + horizon + dt_obs
    states, theta_true = simulate_coupled_truth(
        t_train + t_verify, h_int, subsample, rng_truth)

    obs_rng = substream(seed, "ex7", "obs")
    obs = states[1:, :N_RING] + math.sqrt(r_true) * obs_rng.standard_normal(
        (states.shape[0] - 1, N_RING))

    extraction = extract_parameter_series(
        obs, dt_obs, substream(seed, "ex7", "extract"),
        n_members=n_members, h_int=h_int, init_state=states[0, :N_RING])
    theta_hat = extraction["theta"]
    theta_sd = extraction["theta_std"]

    train_slice = slice(200, n_train)  # drop extraction spin-up
    theta_model = train_theta_model(theta_hat[train_slice], dt_obs,
                                    n_modes=n_modes, n_delays=n_delays,
                                    delay_samples=delay_samples,
                                    subsample=theta_subsample)

    leads = np.arange(0.0, horizon + 1e-9, lead_step)
    stride_rec = int(round(lead_step / dt_obs))
    rng_launch = substream(seed, "ex7", "launch")

    launch_idx = n_train + launch_stride * np.arange(n_launches)
    truth_idx = launch_idx[:, None] + stride_rec * np.arange(len(leads))[None, :]
    truth_x = states[truth_idx][:, :, :N_RING]
    x0 = states[launch_idx][:, :N_RING]
    hidden0 = states[launch_idx][:, N_RING:]
    base_pert = init_spread * rng_launch.standard_normal(
        (n_launches, n_members, N_RING))
    hidden_pert = hidden_init_spread * rng_launch.standard_normal(
        (n_launches, n_members, 3))

    coeffs0 = np.empty((n_launches, theta_model.basis.n_modes))
    for j, m0 in enumerate(launch_idx):
        coeffs0[j] = launch_density_coeffs(
            theta_model, theta_hat[: m0], max(theta_sd[m0 - 1], 1e-3))

    curves = {}
    curves["perfect"] = _batched_forecast_rmse(
        "perfect",
        np.concatenate([x0[:, None] + base_pert,
                        hidden0[:, None] + hidden_pert], axis=2),
        truth_x, leads, dt_obs, h_int)
    curves["semiparam"] = _batched_forecast_rmse(
        "semiparam", x0[:, None] + base_pert, truth_x, leads, dt_obs, h_int,
        theta_model=theta_model, coeffs0=coeffs0, rng=rng_launch)
    curves["l96"] = _batched_forecast_rmse(
        "l96", x0[:, None] + base_pert, truth_x, leads, dt_obs, h_int)

    clim = climatological_error(states[:, :N_RING])
    return dict(leads=leads, rmse=curves, clim_error=clim,
                extraction=extraction, theta_true=theta_true,
                theta_model=theta_model)
