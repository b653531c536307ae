import math

import numpy as np
import pytest

from moderr import models, stoch_param as sp
from moderr.errors import ConfigurationError, IntegrationBlowup
from moderr.util import substream


def test_residual_on_model_consistent_data():
    # data generated by the single-layer model itself leaves only the
    # finite-difference truncation, which shrinks with the sampling step
    spec = models.l96_system(n=8, theta=1.0, forcing=20.0)
    rng = substream(100, "resid-own")
    x0 = 20.0 / 4.0 + rng.standard_normal(8)
    traj = models.simulate_trajectory(spec, x0, t_end=5.0, h=0.001,
                                      subsample=5, spin_up=5.0)
    resid, _ = sp.residual_series(traj.states, 0.005, forcing=20.0)
    rhs_scale = np.abs(models.l96_drift(traj.states, 1.0, 20.0)).mean()
    assert np.abs(resid).mean() < 0.1 * rhs_scale
    # halving the sampling step halves the truncation residual
    traj2 = models.Trajectory(traj.states[::2], dt=0.01)
    resid2, _ = sp.residual_series(traj2.states, 0.01, forcing=20.0)
    assert 1.7 < np.abs(resid2).mean() / np.abs(resid).mean() < 2.3


def test_residual_constant_trajectory():
    x = np.full((10, 8), 3.0)
    resid, states = sp.residual_series(x, 0.005, forcing=20.0)
    assert np.allclose(resid, 3.0 - 20.0)
    assert states.shape == (9, 8)


def test_fit_recovers_synthetic_closure():
    rng = substream(101, "fit-synth")
    n = 60_000
    x = 3.0 * rng.standard_normal(n)
    ar = np.empty(n)
    ar[0] = 0.0
    innov = math.sqrt(1.0 - 0.9 ** 2) * rng.standard_normal(n)
    for i in range(1, n):
        ar[i] = 0.9 * ar[i - 1] + innov[i]
    r = -0.5 * x + ar
    fit = sp.fit_cubic_ar1(r, x)
    assert abs(fit.alpha / 0.5 - 1.0) < 0.02
    assert abs(fit.phi / 0.9 - 1.0) < 0.02
    assert abs(fit.sigma_hat / 1.0 - 1.0) < 0.02
    assert abs(fit.zeta) < 0.05 and abs(fit.beta) < 0.02


def test_constrained_fit_matches_projection():
    rng = substream(102, "fit-con")
    x = rng.standard_normal(5000)
    r = -0.7 * x + 0.3 * rng.standard_normal(5000)
    fit = sp.fit_cubic_ar1(r, x, constrained=True)
    assert fit.zeta == fit.beta == fit.gamma == fit.phi == 0.0
    assert abs(fit.alpha - 0.7) < 0.03
    assert abs(fit.sigma_hat - 0.3) < 0.02


def test_fit_scale_consistency():
    # scaling residuals and states together leaves alpha unchanged
    rng = substream(103, "fit-scale")
    x = rng.standard_normal(20_000)
    r = -0.4 * x + 0.2 * rng.standard_normal(20_000)
    a = sp.fit_cubic_ar1(r, x, constrained=True).alpha
    b = sp.fit_cubic_ar1(5.0 * r, 5.0 * x, constrained=True).alpha
    assert a == pytest.approx(b, rel=1e-9)


def test_fit_rejects_nonstationary_ar():
    with pytest.raises(ConfigurationError):
        sp.OfflineFit(0.0, 0.4, 0.0, 0.0, 1.01, 1.0)


def test_observation_operator_layout():
    h = sp.observation_operator(8, 2, n_aug=1)
    assert h.shape == (4, 9)
    assert np.allclose(h[:, :8][np.arange(4), [0, 2, 4, 6]], 1.0)
    assert np.allclose(h[:, 8], 0.0)


def _reduced_truth(alpha, sigma, n_cycles, dt_obs, seed):
    run = sp.reduced_free_run(alpha, sigma, n_cycles * dt_obs + dt_obs, 0.005,
                              substream(seed, "reduced-truth"), n_batch=1,
                              subsample=int(round(dt_obs / 0.005)))[0]
    return run[: n_cycles + 1]


def test_online_filter_perfect_model_control():
    # truth from the reduced model itself: the augmented filter's alpha
    # estimate converges to the true damping within 10 percent
    alpha_true, sigma_true, dt_obs = 0.4, 1.5, 0.05
    truth = _reduced_truth(alpha_true, sigma_true, 800, dt_obs, 104)
    h_mat = sp.observation_operator(8, 2)
    obs = truth[1:] @ h_mat.T + math.sqrt(0.1) * substream(
        105, "control-obs").standard_normal((800, 4))
    out = sp.online_fit_filter(truth, obs, dt_obs,
                               substream(106, "control-run"),
                               transition_mode="tangent")
    assert abs(out["alpha_mean"] / alpha_true - 1.0) < 0.1
    assert out["rmse"] < 1.0


def test_online_filter_frozen_alpha_regression():
    # zero parameter spread and walk freeze alpha exactly at its init
    truth = _reduced_truth(0.3, 1.0, 60, 0.05, 107)
    h_mat = sp.observation_operator(8, 2)
    obs = truth[1:] @ h_mat.T + math.sqrt(0.1) * substream(
        108, "frozen-obs").standard_normal((60, 4))
    out = sp.online_fit_filter(truth, obs, 0.05,
                               substream(109, "frozen-run"),
                               alpha_walk_std=0.0, alpha0_std=0.0,
                               discard=10)
    assert np.max(np.abs(out["alpha"])) < 1e-12  # alpha0 mean is zero


def test_offline_filter_runs_and_tracks():
    truth = _reduced_truth(0.45, 2.0, 200, 0.05, 110)
    h_mat = sp.observation_operator(8, 2)
    obs = truth[1:] @ h_mat.T + math.sqrt(0.1) * substream(
        111, "off-obs").standard_normal((200, 4))
    fit = sp.OfflineFit(0.0, 0.45, 0.0, 0.0, 0.0, 2.0)
    out = sp.offline_filter(truth, obs, 0.05, fit,
                            substream(112, "off-run"), discard=50)
    assert out["rmse"] < truth.std()  # beats climatology with matched model


def test_cubic_ar1_blowup_is_reportable():
    # a destabilizing cubic closure escapes in finite time
    bad = sp.OfflineFit(0.0, -1.0, 0.0, -0.5, 0.0, 0.5)  # +0.5 x^3 feedback
    with pytest.raises(IntegrationBlowup):
        sp.reduced_free_run(0.0, 0.0, 50.0, 0.005,
                            substream(113, "blowup"), n_batch=2, fit=bad)


def test_climatology_tables_shapes():
    rng = substream(114, "clim-shape")
    run = sp.reduced_free_run(0.4, 1.0, 30.0, 0.005, rng, n_batch=3)
    grid, pdf, lags, rho = sp.climatology_tables(run, 0.005, max_lag_time=2.0)
    assert grid.shape == pdf.shape
    assert abs(np.trapezoid(pdf, grid) - 1.0) < 1e-6
    assert lags.shape == rho.shape
    assert rho[0] == pytest.approx(1.0)


def test_free_run_climatology_variants():
    rng = substream(115, "clim-variants")
    grid, pdf, lags, rho = sp.free_run_climatology(
        "reduced", 20.0, rng, alpha=0.45, sigma=2.0, n_batch=2,
        max_lag_time=1.0)
    assert abs(np.trapezoid(pdf, grid) - 1.0) < 1e-6
    fit = sp.OfflineFit(0.0, 0.45, 0.0, 0.0, 0.9, 1.0)
    _, pdf_c, _, _ = sp.free_run_climatology(
        "cubic_ar1", 20.0, rng, fit=fit, n_batch=2, grid=grid,
        max_lag_time=1.0)
    assert pdf_c.shape == pdf.shape
    with pytest.raises(ConfigurationError):
        sp.free_run_climatology("reduced", 10.0, rng)  # missing params
    with pytest.raises(ConfigurationError):
        sp.free_run_climatology("bogus", 10.0, rng)
