import math

import numpy as np
import pytest

from moderr import adaptive as ad
from moderr.errors import ConfigurationError
from moderr.kalman import GaussianBelief, LinearObs, kf_analysis, kf_forecast, \
    stationary_analysis_cov
from moderr.util import substream


def test_innovation_values():
    assert np.allclose(ad.innovation([1.0, 2.0], [0.0, 2.0], np.eye(2)), [1.0, 0.0])
    assert np.allclose(ad.innovation([0.0], [0.0, 0.0], [[1.0, 0.0]]), [0.0])


def test_banded_q_diagonal_case():
    assert np.allclose(ad.assemble_banded_q(2.0, 0.0, 5), 2.0 * np.eye(5))


def test_banded_q_circulant_eigenvalues():
    q = ad.assemble_banded_q(2.0, 1.0, 4)
    w = np.sort(np.linalg.eigvalsh(q))
    assert np.allclose(w, [0.0, 2.0, 2.0, 4.0], atol=1e-12)


def test_banded_q_psd_threshold():
    # eigenvalues are q1 + 2 q2 cos(2 pi k / n): PSD iff q1 >= 2 |q2|
    n = 64
    assert np.linalg.eigvalsh(ad.assemble_banded_q(1.0, 0.5, n))[0] > -1e-12
    assert np.linalg.eigvalsh(ad.assemble_banded_q(1.0, 0.51, n))[0] < 0.0


def test_banded_projection():
    q, clipped = ad.banded_projection(np.array([1.0, 0.3]))
    assert not clipped and np.allclose(q, [1.0, 0.3])
    q, clipped = ad.banded_projection(np.array([1.0, 0.8]))
    assert clipped and np.allclose(q, [1.0, 0.5])
    q, clipped = ad.banded_projection(np.array([-0.2, 0.1]))
    assert clipped and q[0] == 0.0 and abs(q[1]) <= 1e-12


def _scalar_context(est, f, k, p_b):
    est.transition = np.array([[f]])
    est._freeze(np.array([[p_b]]), np.array([[1.0]]), np.array([[k]]))


def test_scalar_lag0_sensitivities_match_closed_form():
    # frozen-gain steady statistics: E[d^2] = P + r with
    # P = (q + f^2 k^2 r) / (1 - fbar^2), fbar = f (1 - k)
    f, k = 0.9, 0.4
    est = ad.AdaptiveNoiseEstimator([np.eye(1)], (0.3,), 0.8, lag=2)
    _scalar_context(est, f, k, p_b=1.0)
    est.buffer.push(np.array([0.5]))
    values, rows, w_mat = est.pseudo_obs(0)
    fbar2 = (f * (1.0 - k)) ** 2
    dq = 1.0 / (1.0 - fbar2)
    dr = 1.0 + f * f * k * k / (1.0 - fbar2)
    assert rows[0, 0] == pytest.approx(dq, rel=1e-9)
    assert rows[0, 1] == pytest.approx(dr, rel=1e-9)
    assert values[0] == pytest.approx(0.25)
    # Gaussian fourth-moment closure: Var(d^2) = 2 (E d^2)^2 at current theta
    c0 = 0.3 * dq + 0.8 * (dr - 1.0) + 0.8
    assert w_mat[0, 0] == pytest.approx(2.0 * c0 * c0, rel=1e-9)


def test_scalar_lag0_sensitivity_matches_finite_difference_sim():
    # finite difference of a simulated frozen-gain filter wrt r, common noise
    f, k, q, r = 0.85, 0.35, 0.2, 0.6
    n_steps, delta = 400_000, 0.15
    rng = substream(70, "fd-oracle")
    e_noise = rng.standard_normal(n_steps)
    o_noise = rng.standard_normal(n_steps)

    def mean_d2(r_val):
        x, m = 0.0, 0.0
        sq, qs = math.sqrt(q), math.sqrt(r_val)
        acc = 0.0
        for i in range(n_steps):
            x = f * x + sq * e_noise[i]
            v = x + qs * o_noise[i]
            d = v - f * m
            m = f * m + k * d
            acc += d * d
        return acc / n_steps

    fd = (mean_d2(r + delta) - mean_d2(r - delta)) / (2.0 * delta)
    est = ad.AdaptiveNoiseEstimator([np.eye(1)], (q,), r, lag=1)
    _scalar_context(est, f, k, p_b=1.0)
    est.buffer.push(np.array([0.1]))
    _, rows, _ = est.pseudo_obs(0)
    assert abs(fd / rows[0, 1] - 1.0) < 0.05


def test_frozen_gain_covariance_matches_riccati_at_optimum():
    # with the optimal steady gain the Lyapunov accumulation of (Q, R)
    # reproduces the Riccati prior covariance
    rng = substream(71, "lyap-riccati")
    n = 4
    f_mat = 0.9 * np.roll(np.eye(n), 1, axis=1)
    q_mat = ad.assemble_banded_q(0.3, 0.1, n)
    r_mat = 0.5 * np.eye(n)
    lin = LinearObs(np.eye(n), r_mat)
    pa = stationary_analysis_cov(f_mat, q_mat, lin)
    pb = f_mat @ pa @ f_mat.T + q_mat
    k_gain = pb @ np.linalg.solve(pb + r_mat, np.eye(n))
    est = ad.banded_estimator(n, 0.3, 0.1, 0.5, transition=f_mat)
    est._freeze(pb, np.eye(n), k_gain)
    p_theta = (0.3 * est._context["p_parts"][0]
               + 0.1 * est._context["p_parts"][1]
               + 0.5 * est._context["p_parts"][2])
    assert np.max(np.abs(p_theta - pb)) < 1e-8


def test_lag_value_vanishes_at_optimal_gain():
    # whiteness of optimal-filter innovations: C_l(theta_true) ~ 0
    n = 3
    f_mat = 0.8 * np.eye(n)
    q_mat = 0.4 * np.eye(n)
    r_mat = 0.7 * np.eye(n)
    lin = LinearObs(np.eye(n), r_mat)
    pa = stationary_analysis_cov(f_mat, q_mat, lin)
    pb = f_mat @ pa @ f_mat.T + q_mat
    k_gain = pb @ np.linalg.solve(pb + r_mat, np.eye(n))
    est = ad.AdaptiveNoiseEstimator([np.eye(n)], (0.4,), 0.7,
                                    transition=f_mat, lag=2)
    est._freeze(pb, np.eye(n), k_gain)
    est.buffer.push(np.zeros(n))
    est.buffer.push(np.zeros(n))
    _, rows, _ = est.pseudo_obs(1)
    # model value at the true theta: row dot theta
    assert abs(rows[0] @ est.theta) < 1e-10


def test_zero_pseudo_innovation_keeps_mean():
    est = ad.AdaptiveNoiseEstimator([np.eye(1)], (0.3,), 0.8, lag=1,
                                    transition=np.array([[0.9]]))
    est._freeze(np.array([[1.0]]), np.eye(1), np.array([[0.4]]))
    _, rows, _ = est.pseudo_obs(0) if est.buffer.ready(0) else (None, None, None)
    # craft an innovation whose squared value equals the model prediction
    predicted = None
    est.buffer.push(np.array([0.0]))
    _, rows, _ = est.pseudo_obs(0)
    predicted = rows @ est.theta
    theta_before = est.theta.copy()
    est.update(np.array([math.sqrt(predicted[0])]), np.eye(1),
               np.array([[1.0]]), np.array([[0.4]]))
    assert np.allclose(est.theta, theta_before, rtol=1e-9)


def test_optimal_filter_innovations_are_white():
    rng = substream(72, "whiteness")
    f, q, r = 0.9, 0.3, 0.5
    lin = LinearObs([[1.0]], [[r]])
    pa = stationary_analysis_cov([[f]], [[q]], lin)[0, 0]
    pb = f * pa * f + q
    k = pb / (pb + r)
    n_steps = 200_000
    x = 0.0
    m = 0.0
    sq, sr = math.sqrt(q), math.sqrt(r)
    e_noise = rng.standard_normal(n_steps)
    o_noise = rng.standard_normal(n_steps)
    d_prev = 0.0
    acc01 = acc00 = 0.0
    for i in range(n_steps):
        x = f * x + sq * e_noise[i]
        v = x + sr * o_noise[i]
        d = v - f * m
        m = f * m + k * d
        acc01 += d * d_prev
        acc00 += d * d
        d_prev = d
    corr = acc01 / acc00
    assert abs(corr) < 3.0 / math.sqrt(n_steps)


def _run_linear_twin(n_cycles, seed, q1_true=0.2, q2_true=0.05, r_true=0.5,
                     q1_0=0.4, q2_0=0.0, r0=1.0, n=8):
    """Primary KF with adaptive (Q, R) on a linear circulant twin system."""
    rng = substream(seed, "linear-twin")
    f_mat = 0.9 * np.roll(np.eye(n), 1, axis=1)
    q_true = ad.assemble_banded_q(q1_true, q2_true, n)
    chol_q = np.linalg.cholesky(q_true + 1e-12 * np.eye(n))
    est = ad.banded_estimator(n, q1_0, q2_0, r0, transition=f_mat, lag=2)
    belief = GaussianBelief(np.zeros(n), np.eye(n))
    x = rng.standard_normal(n)
    h_mat = np.eye(n)
    trace = []
    for m in range(n_cycles):
        x = f_mat @ x + chol_q @ rng.standard_normal(n)
        v = x + math.sqrt(r_true) * rng.standard_normal(n)
        belief = kf_forecast(belief, f_mat, est.q_matrix())
        r_hat = est.r
        lin = LinearObs(h_mat, r_hat * np.eye(n))
        pb = belief.cov
        k_gain = pb @ np.linalg.solve(pb + r_hat * np.eye(n), np.eye(n))
        d = ad.innovation(v, belief.mean, h_mat)
        belief = kf_analysis(belief, v, lin)
        est.update(d, h_mat, pb, k_gain)
        trace.append([est.theta[0], est.theta[1], est.r])
    return np.array(trace)


def test_linear_twin_recovers_noise_parameters():
    trace = _run_linear_twin(5000, seed=73)
    tail = trace[len(trace) // 2:]
    q1_mean, q2_mean, r_mean = tail.mean(axis=0)
    assert abs(q1_mean / 0.2 - 1.0) < 0.2
    assert abs(r_mean / 0.5 - 1.0) < 0.2
    assert abs(q2_mean - 0.05) < 0.05


def test_estimator_keeps_r_positive():
    est = ad.AdaptiveNoiseEstimator([np.eye(1)], (0.1,), 0.01, lag=1,
                                    transition=np.array([[0.9]]),
                                    r_min=1e-6)
    rng = substream(74, "rpos")
    for _ in range(200):
        d = 0.001 * rng.standard_normal(1)  # innovations far below model
        est.update(d, np.eye(1), np.array([[0.5]]), np.array([[0.3]]))
        assert est.r >= 1e-6


def test_estimator_rejects_bad_config():
    with pytest.raises(ConfigurationError):
        ad.AdaptiveNoiseEstimator([], (0.1,), 1.0)
    with pytest.raises(ConfigurationError):
        ad.AdaptiveNoiseEstimator([np.eye(2)], (0.1,), -1.0)
    with pytest.raises(ConfigurationError):
        ad.NoiseParams(-0.1, 0.0, 1.0)
