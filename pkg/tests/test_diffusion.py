import warnings

import numpy as np
import pytest

from moderr import diffusion as df
from moderr.errors import ConfigurationError, DomainError
from moderr.util import substream


def _ou_series(n, tau, seed, a=1.0):
    """OU samples dx = -a x dt + sqrt(2) dW at interval tau."""
    rng = substream(seed, "ou-series")
    h = min(0.01, tau / 2.0)
    sub = max(int(round(tau / h)), 1)
    x = np.empty(n * sub + 1)
    x[0] = 0.0
    noise = rng.standard_normal(n * sub)
    for i in range(n * sub):
        x[i + 1] = (1.0 - a * h) * x[i] + np.sqrt(2.0 * h) * noise[i]
    return x[::sub][:n, None]


@pytest.fixture(scope="module")
def ou_basis():
    series = _ou_series(3000, 0.1, 120)
    # 1-d Gaussian-tailed data needs a wider kernel than the mass rule picks
    basis = df.build_basis(series, n_modes=8, bandwidth=0.02)
    return series, basis


def test_ou_eigenfunction_ordering(ou_basis):
    _, basis = ou_basis
    assert np.allclose(basis.phi[:, 0], 1.0)
    assert basis.lambdas[0] == 0.0
    assert np.all(np.diff(basis.lambdas) <= 1e-12)
    order = np.argsort(basis.points[:, 0])
    for j in range(4):
        changes = int(np.sum(np.diff(np.sign(basis.phi[order, j])) != 0))
        assert changes == j  # Hermite-like sign-change count


def test_ou_orthonormality(ou_basis):
    _, basis = ou_basis
    assert basis.gram_residual() <= 0.05


def test_ou_shift_spectrum_matches_generator(ou_basis):
    _, basis = ou_basis
    shift = df.build_shift_operator(basis, 0.1)
    mags = np.sort(np.abs(np.linalg.eigvals(shift.matrix)))[::-1]
    for j in (1, 2):
        assert abs(mags[j] / np.exp(-j * 0.1) - 1.0) < 0.1


def test_mass_bandwidth_hits_target():
    rng = substream(121, "bw")
    pts = rng.standard_normal((400, 2))
    eps = df.mass_bandwidth(pts, target=0.02)
    from scipy.spatial.distance import pdist
    d2 = pdist(pts, metric="sqeuclidean")
    assert abs(np.exp(-d2 / (4 * eps)).mean() - 0.02) < 1e-6


def test_build_basis_deduplicates():
    series = _ou_series(600, 0.1, 122)
    series = np.concatenate([series, series[:3]])
    with pytest.warns(UserWarning, match="duplicated"):
        basis = df.build_basis(series, n_modes=5, bandwidth=0.02)
    assert basis.n_points == 600


def test_shift_operator_mass_structure(ou_basis):
    _, basis = ou_basis
    shift = df.build_shift_operator(basis, 0.1)
    e1 = np.zeros(basis.n_modes)
    e1[0] = 1.0
    assert np.max(np.abs(shift.matrix @ e1 - e1)) < 1e-12
    assert np.max(np.abs(shift.matrix[0] - e1)) < 1e-12
    # mass conservation under evolution for arbitrary coefficients
    rng = substream(123, "mass")
    c = rng.standard_normal(basis.n_modes)
    out = df.evolve(c, shift, 50)
    assert abs(out[0] - c[0]) < 1e-6


def test_shuffled_series_operator_kills_dynamics(ou_basis):
    series, basis = ou_basis
    rng = substream(124, "shuffle")
    perm = rng.permutation(basis.n_points)
    shuffled = df.DiffusionBasis(basis.points[perm], basis.phi[perm],
                                 basis.lambdas, basis.p_eq[perm],
                                 basis.bandwidth)
    shift = df.build_shift_operator(shuffled, 0.1)
    off_mass = shift.matrix.copy()
    off_mass[0, 0] = 0.0
    assert np.max(np.abs(off_mass)) < 5.0 / np.sqrt(basis.n_points)


def test_slow_series_operator_near_identity():
    # nearly frozen dynamics: consecutive points almost coincide
    series = _ou_series(2500, 0.002, 125)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        basis = df.build_basis(series, n_modes=6, bandwidth=0.02)
    shift = df.build_shift_operator(basis, 0.002, stabilize=False)
    assert np.max(np.abs(np.diag(shift.matrix) - 1.0)) < 0.1


def test_stabilize_identity_cases():
    a = np.diag([0.9, 0.5])
    assert np.max(np.abs(df.stabilize_spectrum(a) - a)) < 1e-10
    b = np.diag([1.2, 0.5])
    out = df.stabilize_spectrum(b)
    assert np.allclose(np.sort(np.abs(np.linalg.eigvals(out)))[::-1],
                       [1.0, 0.5], atol=1e-10)


def test_stabilized_powers_stay_bounded():
    rng = substream(126, "powers")
    a = np.eye(12) + 0.05 * rng.standard_normal((12, 12))
    out = df.stabilize_spectrum(a)
    power = np.linalg.matrix_power(out, 10_000)
    assert np.all(np.isfinite(power))
    assert np.max(np.abs(power)) < 1e3


def test_project_equilibrium_gives_unit_vector(ou_basis):
    _, basis = ou_basis
    c = df.project_density(basis.p_eq, basis)
    e1 = np.zeros(basis.n_modes)
    e1[0] = 1.0
    assert np.max(np.abs(c - e1)) <= basis.gram_residual() + 1e-9


def test_project_mode_density(ou_basis):
    _, basis = ou_basis
    # p = p_eq (1 + phi_2/2) is a proper signed-free density where positive
    values = basis.p_eq * (1.0 + 0.5 * basis.phi[:, 1])
    c = df.project_density(np.clip(values, 0.0, None), basis)
    assert abs(c[0] - 1.0) < 0.1
    assert abs(c[1] - 0.5) < 0.1
    assert np.max(np.abs(c[2:])) < 0.15


def test_project_weights_mode(ou_basis):
    _, basis = ou_basis
    w = np.full(basis.n_points, 1.0 / basis.n_points)
    c = df.project_density(w, basis, weights=True)
    assert c[0] == pytest.approx(1.0)
    with pytest.raises(DomainError):
        df.project_density(np.zeros(basis.n_points), basis)


def test_reconstruct_equilibrium(ou_basis):
    _, basis = ou_basis
    e1 = np.zeros(basis.n_modes)
    e1[0] = 1.0
    dens = df.reconstruct_density(e1, basis)
    assert np.allclose(dens, basis.p_eq, rtol=1e-9)


def test_reconstruct_normalization_and_clipping(ou_basis):
    _, basis = ou_basis
    rng = substream(127, "recon")
    c = np.zeros(basis.n_modes)
    c[0] = 1.0
    c[1:] = 0.8 * rng.standard_normal(basis.n_modes - 1)
    dens, clip_frac = df.reconstruct_density(c, basis,
                                             return_clip_fraction=True)
    assert np.all(dens >= 0.0)
    assert abs(np.mean(dens / basis.p_eq) - 1.0) < 1e-9
    assert clip_frac > 0.0  # wild coefficients must have produced ringing


def test_evolve_trivia(ou_basis):
    _, basis = ou_basis
    shift = df.build_shift_operator(basis, 0.1)
    c = np.zeros(basis.n_modes)
    c[0], c[1] = 1.0, 0.4
    assert np.array_equal(df.evolve(c, shift, 0), c)
    long = df.evolve(c, shift, 5000)
    e1 = np.zeros(basis.n_modes)
    e1[0] = 1.0
    assert np.max(np.abs(long - e1)) < 1e-3


def test_sample_density_equilibrium_draw(ou_basis):
    _, basis = ou_basis
    rng = substream(128, "sample-eq")
    e1 = np.zeros(basis.n_modes)
    e1[0] = 1.0
    draws = df.sample_density(e1, basis, 40_000, rng)
    assert abs(draws.mean() - basis.points.mean()) < 0.05
    assert abs(draws.var() / basis.points.var() - 1.0) < 0.05


def test_sample_density_concentrates_on_bump(ou_basis):
    _, basis = ou_basis
    rng = substream(129, "sample-bump")
    center = 0.8
    bump = df.gaussian_bump_values(basis, [center], [[0.15 ** 2]])
    c = df.project_density(bump, basis)
    draws = df.sample_density(c, basis, 20_000, rng)
    assert abs(draws.mean() - center) < 0.25


def test_sample_moments_match_reconstruction(ou_basis):
    _, basis = ou_basis
    rng = substream(130, "sample-mom")
    bump = df.gaussian_bump_values(basis, [-0.5], [[0.3 ** 2]])
    c = df.project_density(bump, basis)
    mean_d, cov_d = df.density_moments(c, basis)
    draws = df.sample_density(c, basis, 100_000, rng)
    assert abs(draws.mean() - mean_d[0]) < 0.02
    assert abs(draws.var() / cov_d[0, 0] - 1.0) < 0.05


def test_basis_requires_enough_points():
    with pytest.raises(ConfigurationError):
        df.build_basis(np.zeros((40, 1)), n_modes=10)
