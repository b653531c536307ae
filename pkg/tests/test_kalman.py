import math

import numpy as np
import pytest

from moderr import kalman as kf
from moderr.errors import ConfigurationError, DegenerateEnsembleError
from moderr.util import substream


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


def test_forecast_identity():
    belief = kf.GaussianBelief([1.0, 2.0], np.diag([0.5, 0.25]))
    out = kf.kf_forecast(belief, np.eye(2), np.zeros((2, 2)))
    assert np.allclose(out.mean, belief.mean)
    assert np.allclose(out.cov, belief.cov)


def test_forecast_scalar_exact_discretization():
    # scalar a = -2, dt = 1, sigma^2 = 2: F = e^-2, Q = 0.5 (1 - e^-4)
    f = math.exp(-2.0)
    q = 2.0 / 4.0 * (1.0 - math.exp(-4.0))
    assert abs(f - 0.1353352832366127) < 1e-15
    assert abs(q - 0.4908421805556329) < 1e-15
    belief = kf.GaussianBelief([1.0], [[0.3]])
    out = kf.kf_forecast(belief, [[f]], [[q]])
    assert out.mean[0] == pytest.approx(f)
    assert out.cov[0, 0] == pytest.approx(f * 0.3 * f + q)


def test_forecast_zero_prior_cov_gives_q():
    belief = kf.GaussianBelief([0.0], [[0.0]])
    out = kf.kf_forecast(belief, [[0.9]], [[0.7]])
    assert out.cov[0, 0] == pytest.approx(0.7)


def test_analysis_uninformative_observation():
    belief = kf.GaussianBelief([1.0, -1.0], np.diag([2.0, 3.0]))
    obs = kf.LinearObs(np.eye(2), 1e12 * np.eye(2))
    out = kf.kf_analysis(belief, [50.0, 50.0], obs)
    assert np.allclose(out.mean, belief.mean, atol=1e-9)
    assert np.allclose(out.cov, belief.cov, rtol=1e-9)


def test_analysis_equal_weight_scalar():
    belief = kf.GaussianBelief([0.0], [[1.0]])
    out = kf.kf_analysis(belief, [2.0], kf.LinearObs([[1.0]], [[1.0]]))
    assert out.mean[0] == pytest.approx(1.0)
    assert out.cov[0, 0] == pytest.approx(0.5)


def scalar_riccati_fixed_point_bisection(f, q, r):
    """Independent oracle: solve the scalar analysis-covariance fixed point.

    p_a solves p_a = g(p_a) with g(p) = (f^2 p + q) r / (f^2 p + q + r);
    g is increasing and bounded by r, so bisection on [0, r] applies.
    """
    lo, hi = 0.0, r
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        pb = f * f * mid + q
        if pb * r / (pb + r) > mid:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_riccati_iteration_matches_bisection_oracle():
    for f, q, r in [(0.9, 0.3, 1.0), (math.exp(-2.0), 0.49, 0.5),
                    (0.99, 0.01, 2.0), (0.5, 1.5, 0.2)]:
        oracle = scalar_riccati_fixed_point_bisection(f, q, r)
        obs = kf.LinearObs([[1.0]], [[r]])
        cov = kf.stationary_analysis_cov([[f]], [[q]], obs)
        assert abs(cov[0, 0] - oracle) < 1e-8


def test_analysis_never_increases_covariance():
    rng = substream(40, "psd-order")
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, n + 1))
        belief = kf.GaussianBelief(rng.standard_normal(n),
                                   random_spd(rng, n, 0.5))
        obs = kf.LinearObs(rng.standard_normal((m, n)), random_spd(rng, m, 0.3))
        out = kf.kf_analysis(belief, rng.standard_normal(m), obs)
        diff = belief.cov - out.cov
        assert np.linalg.eigvalsh(kf.symmetrize(diff))[0] > -1e-10
        assert np.max(np.abs(out.cov - out.cov.T)) < 1e-12


def test_ensemble_from_belief_exact_moments():
    rng = substream(41, "ens-belief")
    belief = kf.GaussianBelief(rng.standard_normal(3), random_spd(rng, 3))
    ens = kf.ensemble_from_belief(belief)
    assert np.allclose(ens.mean(), belief.mean)
    assert np.allclose(ens.cov(), belief.cov)


def test_etkf_matches_kalman_for_linear_gaussian():
    rng = substream(42, "etkf-kf")
    for _ in range(20):
        n = int(rng.integers(2, 5))
        m = int(rng.integers(1, n + 1))
        belief = kf.GaussianBelief(rng.standard_normal(n), random_spd(rng, n))
        obs = kf.LinearObs(rng.standard_normal((m, n)), random_spd(rng, m))
        v = rng.standard_normal(m)
        kf_post = kf.kf_analysis(belief, v, obs)
        ens_post = kf.etkf_analysis(kf.ensemble_from_belief(belief), v, obs)
        post = kf.Ensemble(ens_post.members)
        assert np.max(np.abs(post.mean() - kf_post.mean)) < 1e-8
        assert np.max(np.abs(post.cov() - kf_post.cov)) < 1e-8


def test_etkf_mean_preserving_transform():
    rng = substream(43, "etkf-mean")
    ens = kf.Ensemble(rng.standard_normal((7, 4)))
    obs = kf.LinearObs(np.eye(4)[:2], 0.5 * np.eye(2))
    post = kf.etkf_analysis(ens, rng.standard_normal(2), obs)
    anom = post.members - post.members.mean(axis=0)
    assert np.max(np.abs(anom.sum(axis=0))) < 1e-10


def test_etkf_uninformative_keeps_ensemble():
    rng = substream(44, "etkf-noop")
    ens = kf.Ensemble(rng.standard_normal((6, 3)))
    obs = kf.LinearObs(np.eye(3), 1e12 * np.eye(3))
    post = kf.etkf_analysis(ens, np.zeros(3), obs, additive_q=np.zeros((3, 3)))
    assert np.max(np.abs(post.members - ens.members)) < 1e-4


def test_etkf_nonlinear_obs_operator():
    rng = substream(45, "etkf-h")
    ens = kf.Ensemble(1.0 + 0.1 * rng.standard_normal((10, 2)))
    h_fn = lambda x: np.array([x[0] ** 2])
    post = kf.etkf_analysis(ens, [1.21], (h_fn, [[0.01]]))
    assert post.members.shape == (10, 2)
    assert abs(post.members[:, 0].mean() - 1.1) < 0.1


def test_etkf_additive_q_inflates_spread():
    rng = substream(46, "etkf-q")
    base = kf.Ensemble(0.01 * rng.standard_normal((20, 3)))
    obs = kf.LinearObs(np.eye(3), 1e12 * np.eye(3))
    post = kf.etkf_analysis(base, np.zeros(3), obs,
                            additive_q=0.5 * np.eye(3),
                            rng=substream(47, "etkf-q-draws"))
    assert post.cov().trace() > 10 * base.cov().trace()


def test_etkf_rejects_tiny_or_collapsed():
    with pytest.raises(DegenerateEnsembleError):
        kf.Ensemble(np.zeros((1, 3)))
    ens = kf.Ensemble(np.ones((5, 3)))
    obs = kf.LinearObs(np.eye(3), np.eye(3))
    with pytest.raises(DegenerateEnsembleError):
        kf.etkf_analysis(ens, np.zeros(3), obs)


def test_etkf_deterministic_given_seed():
    def run():
        rng = substream(48, "etkf-det")
        ens = kf.Ensemble(rng.standard_normal((8, 3)))
        obs = kf.LinearObs(np.eye(3)[:1], [[0.2]])
        return kf.etkf_analysis(ens, [0.3], obs, additive_q=0.1 * np.eye(3),
                                rng=rng).members

    assert np.array_equal(run(), run())


def test_augment_persistence_keeps_parameters():
    system = kf.augment_state(lambda x, th, t: -x * th, 2, 1)
    z = np.array([1.0, 2.0, 0.7])
    dz = system.drift(z)
    assert np.allclose(dz, [-0.7, -1.4, 0.0])
    members = np.tile(z, (5, 1))
    out = system.perturb_params(members, 0.1, substream(49, "aug-p"))
    assert np.array_equal(out, members)


def test_augment_white_noise_grows_parameter_variance():
    system = kf.augment_state(lambda x, th, t: -x, 1, 1,
                              param_model="white", noise_std=0.5)
    members = np.zeros((200_000, 2))
    out = system.perturb_params(members, 0.2, substream(50, "aug-w"))
    assert abs(out[:, 1].var() / (0.25 * 0.2) - 1.0) < 0.02
    assert np.allclose(out[:, 0], 0.0)


def test_augmented_drift_matches_reduced_model_form():
    # augmenting the damped Lorenz-96 closure with a frozen alpha reproduces
    # the joint system with d(alpha)/dt = 0
    from moderr.models import l96_drift

    def closure_drift(x, theta, t):
        return l96_drift(x, 1.0, 20.0) - theta * x

    system = kf.augment_state(closure_drift, 8, 1)
    rng = substream(51, "aug-l96")
    x = rng.standard_normal(8)
    z = np.concatenate([x, [0.4]])
    dz = system.drift(z)
    assert np.allclose(dz[:8], l96_drift(x, 1.0, 20.0) - 0.4 * x)
    assert dz[8] == 0.0


def test_clip_psd_rejects_strongly_indefinite():
    from moderr.errors import NumericalError
    with pytest.raises(NumericalError):
        kf.clip_psd(np.diag([1.0, -0.5]))
