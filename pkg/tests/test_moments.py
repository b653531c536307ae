import math

import numpy as np
import pytest

from moderr import moments
from moderr.errors import ConfigurationError
from moderr.moments import Closure, MomentState
from moderr.util import substream


def test_rhs_linear_case_reduces_to_ou():
    m = MomentState(0.7, 0.3)
    out = moments.moment_rhs(m, a=-2.0, b=0.0)
    assert np.allclose(out, [-2.0 * 0.7, 2.0 * -2.0 * 0.3, 0.0])


def test_rhs_hand_value():
    m = MomentState(0.5, 0.01)
    out = moments.moment_rhs(m, a=-1.0, b=0.1)
    assert abs(out[0] - (-0.474)) < 1e-12
    assert abs(out[1] - (-0.018)) < 1e-12


def test_rhs_zero_state_is_fixed_point():
    out = moments.moment_rhs(MomentState(0.0, 0.0), a=3.0, b=-2.0)
    assert np.allclose(out, 0.0)


def test_closures_agree_when_skew_zero():
    m = MomentState(0.4, 0.2, 0.0)
    a_out = moments.moment_rhs(m, -1.0, 0.3, Closure.GAUSSIAN_S0)
    b_out = moments.moment_rhs(m, -1.0, 0.3, Closure.CARRY_S)
    assert np.allclose(a_out, b_out)


def test_integrate_linear_matches_ou_solution():
    times, states = moments.integrate_moments(
        MomentState(1.0, 1.0), a=-1.0, b=0.0, t_end=1.0, h=0.01)
    assert abs(states[-1].mean - math.exp(-1.0)) < 1e-8
    assert abs(states[-1].var - math.exp(-2.0)) < 1e-8
    assert times[-1] == pytest.approx(1.0)


def test_integrate_closures_identical_at_zero_skew():
    a_states = moments.integrate_moments(
        MomentState(0.5, 0.01), -1.0, 0.1, 0.5, 0.01, Closure.GAUSSIAN_S0)[1]
    b_states = moments.integrate_moments(
        MomentState(0.5, 0.01, 0.0), -1.0, 0.1, 0.5, 0.01, Closure.CARRY_S)[1]
    assert np.allclose([s.mean for s in a_states], [s.mean for s in b_states])


def test_oracle_linear_mean():
    rng = substream(20, "oracle-linear")
    sampler = lambda r, n: 0.5 + 0.1 * r.standard_normal(n)
    times, means, _, _, escaped = moments.liouville_mc_oracle(
        sampler, a=-1.0, b=0.0, t_end=0.5, h=0.01, n_samples=20_000,
        rng=rng, n_out=10)
    assert np.all(escaped == 0.0)
    expected = 0.5 * np.exp(-times)
    assert np.max(np.abs(means - expected)) < 3.0 * 0.1 / math.sqrt(20_000)


def test_oracle_point_mass_stays_degenerate():
    rng = substream(21, "oracle-point")
    sampler = lambda r, n: np.full(n, 0.3)
    _, _, vars, skews, _ = moments.liouville_mc_oracle(
        sampler, a=-1.0, b=0.2, t_end=0.3, h=0.01, n_samples=10_000,
        rng=rng, n_out=5)
    assert np.max(np.abs(vars)) < 1e-20
    assert np.max(np.abs(skews)) < 1e-28


def test_oracle_requires_enough_samples():
    with pytest.raises(ConfigurationError):
        moments.liouville_mc_oracle(lambda r, n: np.zeros(n), -1.0, 0.0,
                                    0.1, 0.01, 100, substream(22, "few"))


def test_closure_tracks_oracle_mean():
    # the acceptance-level comparison at a gentler sample size
    rng = substream(23, "closure-oracle")
    sampler = lambda r, n: 0.5 + 0.1 * r.standard_normal(n)
    times, mc_means, _, _, _ = moments.liouville_mc_oracle(
        sampler, a=-1.0, b=0.1, t_end=0.5, h=0.005, n_samples=100_000,
        rng=rng, n_out=20)
    _, states = moments.integrate_moments(
        MomentState(0.5, 0.01), -1.0, 0.1, 0.5, 0.005)
    closed = {round(t, 9): s.mean for t, s in
              zip(np.linspace(0, 0.5, len(states)), states)}
    for t, mu in zip(times, mc_means):
        assert abs(closed[round(t, 9)] - mu) / abs(mu) < 0.02


def test_decompose_identical_samples():
    rng = substream(24, "decomp-same")
    x = rng.standard_normal((200, 3))
    dec = moments.decompose_error(x, x)
    assert np.allclose(dec.mean_error, 0.0)
    assert np.allclose(dec.error_cov, 0.0)
    assert np.allclose(dec.cross_cov, 0.0)
    assert np.allclose(dec.truth_cov, dec.model_cov)


def test_decompose_constant_shift():
    rng = substream(25, "decomp-shift")
    x = rng.standard_normal((500, 2))
    shift = np.array([0.3, -1.2])
    dec = moments.decompose_error(x, x + shift)
    assert np.allclose(dec.mean_error, -shift)
    assert np.allclose(dec.error_cov, 0.0, atol=1e-14)
    assert np.allclose(dec.cross_cov, 0.0, atol=1e-14)
    assert np.allclose(dec.truth_cov, dec.model_cov)


def test_decompose_identity_is_exact_algebra():
    rng = substream(26, "decomp-random")
    for trial in range(5):
        x = rng.standard_normal((50 + 10 * trial, 4))
        xm = x + 0.5 * rng.standard_normal(x.shape) + 0.1 * x ** 2
        dec = moments.decompose_error(x, xm)
        assert dec.identity_residual < 1e-12


def test_decompose_needs_two_samples():
    with pytest.raises(ConfigurationError):
        moments.decompose_error(np.zeros((1, 2)), np.zeros((1, 2)))
