"""Nonparametric density forecasting in a data-driven eigenbasis.

A Gaussian-kernel diffusion-maps construction on a time series sampled
from an ergodic system yields eigenfunctions of the generator of the
gradient flow whose potential is the negative log of the sampling
density.  Densities are carried as coefficient vectors in that basis;
a shift operator estimated from consecutive training pairs propagates
the coefficients one sampling interval at a time, spectrally clipped so
the forecast relaxes to the equilibrium density instead of blowing up.

All inner products are Monte-Carlo averages over the training points,
which sample the equilibrium measure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import eigsh
from scipy.spatial.distance import pdist, squareform

from .errors import ConfigurationError, DomainError

EIGENVALUE_FLOOR = 1e-8


@dataclass(frozen=True)
class DiffusionBasis:
    """Training points, eigenfunction values, spectrum and sampling density.

    ``phi`` has one eigenfunction per column, unit empirical norm under
    the sampling measure and constant first column; ``lambdas`` are the
    matching generator eigenvalue estimates (0 = lambdas[0] >= ...);
    ``p_eq`` is the kernel density estimate at the training points.
    """

    points: np.ndarray       # (N, d)
    phi: np.ndarray          # (N, M)
    lambdas: np.ndarray      # (M,)
    p_eq: np.ndarray         # (N,)
    bandwidth: float

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_modes(self):
        return self.phi.shape[1]

    def gram_residual(self):
        """Max deviation of (1/N) phi' phi from the identity."""
        gram = self.phi.T @ self.phi / self.n_points
        return float(np.max(np.abs(gram - np.eye(self.n_modes))))


@dataclass(frozen=True)
class ShiftOperator:
    """Basis representation of the one-step composition operator."""

    matrix: np.ndarray
    tau: float

    @property
    def n_modes(self):
        return self.matrix.shape[0]


def median_bandwidth(points):
    """Global kernel scale: median squared distance over 2 * dimension.

    A coarse fallback; on attractor data this scale is as wide as the
    whole set and the resulting operator badly violates the empirical
    orthonormality gate, so :func:`mass_bandwidth` is the default policy.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d2 = pdist(pts, metric="sqeuclidean")
    return float(np.median(d2)) / (2.0 * pts.shape[1])


def mass_bandwidth(points, target=0.01):
    """Kernel scale at which the mean pairwise kernel mass hits ``target``.

    The mean of exp(-d^2/(4 eps)) over all pairs is monotone in eps, so
    the scale resolving a ``target`` fraction of neighbor mass is found
    by bisection; 0.01 keeps enough neighbors in the kernel for a stable
    operator while staying far below the attractor diameter.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d2 = pdist(pts, metric="sqeuclidean")
    positive = d2[d2 > 0]
    if positive.size == 0:
        raise ConfigurationError("all training points coincide")

    def mass(log_eps):
        return float(np.exp(-d2 / (4.0 * math.exp(log_eps))).mean()) - target

    lo = math.log(np.min(positive) / 4.0)
    hi = math.log(np.max(d2) * 10.0)
    from scipy.optimize import brentq
    return float(math.exp(brentq(mass, lo, hi)))


def build_basis(series, n_modes=50, bandwidth=None):
    """Diffusion-maps eigenbasis from an ergodic training series.

    The kernel is exp(-|x - y|^2 / (4 eps)) with the 1/2-power density
    normalization, whose random-walk limit is the generator of the
    isotropic gradient flow in the potential -log p_eq.  Eigenvectors are
    rescaled to unit empirical norm under the sampling measure with the
    first column pinned to one; duplicated training points are dropped
    with a warning, and the requested mode count is truncated to the part
    of the spectrum that is numerically resolvable.
    """
    pts = np.atleast_2d(np.asarray(series, dtype=float))
    if pts.shape[0] < 10 * n_modes:
        raise ConfigurationError("need at least 10 training points per mode")
    d2 = squareform(pdist(pts, metric="sqeuclidean"))
    dup = np.any(np.triu(d2 == 0.0, k=1), axis=0)
    if np.any(dup):
        warnings.warn(f"dropping {int(dup.sum())} duplicated training points")
        keep = ~dup
        pts = pts[keep]
        d2 = d2[np.ix_(keep, keep)]
    n = pts.shape[0]

    eps = mass_bandwidth(pts) if bandwidth is None else float(bandwidth)
    if eps <= 0:
        raise ConfigurationError("bandwidth must be positive")
    kernel = np.exp(-d2 / (4.0 * eps))
    q = kernel.sum(axis=1)
    # 1/2-power normalization: random-walk limit is the gradient-flow
    # generator rather than Laplace-Beltrami
    kernel /= np.sqrt(q)[:, None]
    kernel /= np.sqrt(q)[None, :]
    deg = kernel.sum(axis=1)
    inv_sqrt_deg = 1.0 / np.sqrt(deg)
    sym = kernel * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]

    k_solve = min(n_modes + 5, n - 1)
    vals, vecs = eigsh(sym, k=k_solve, which="LA", tol=1e-9)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]

    usable = vals > EIGENVALUE_FLOOR
    n_usable = int(usable.sum())
    if n_usable < n_modes:
        warnings.warn(
            f"spectrum resolves only {n_usable} of {n_modes} requested modes")
    m = min(n_modes, n_usable)
    vals, vecs = vals[:m], vecs[:, :m]

    # right eigenvectors of the Markov matrix, pinned and normalized
    phi = vecs * inv_sqrt_deg[:, None]
    phi /= phi[:, 0:1]
    norms = np.sqrt(np.mean(phi ** 2, axis=0))
    phi /= norms[None, :]
    # deterministic sign: the largest-magnitude entry of each mode is positive
    picks = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[picks, np.arange(m)])
    phi *= signs[None, :]

    lambdas = np.log(np.clip(vals, EIGENVALUE_FLOOR, None)) / eps
    lambdas[0] = 0.0
    p_eq = q / (n * (4.0 * math.pi * eps) ** (pts.shape[1] / 2.0))
    return DiffusionBasis(pts, phi, lambdas, p_eq, eps)


def project_density(values, basis, weights=False):
    """Coefficients of a density from point evaluations or point masses.

    With ``weights=False`` the input holds density values at the training
    points and the inner product divides by the sampling density; with
    ``weights=True`` the input holds probability masses attached to the
    training points (e.g. importance weights) and the coefficient is the
    weighted eigenfunction average.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (basis.n_points,):
        raise ConfigurationError("need one value per training point")
    if np.all(values == 0.0):
        raise DomainError("cannot project an all-zero density")
    if weights:
        return basis.phi.T @ values
    return basis.phi.T @ (values / basis.p_eq) / basis.n_points


def build_shift_operator(basis, tau, stabilize=True):
    """Shift operator estimated from consecutive training pairs.

    A_jl = mean_i phi_j(x_{i+1}) phi_l(x_i) estimates the semigroup that
    advances density coefficients by one sampling interval ``tau``; the
    mass row and column are pinned exactly (the constant-function
    coefficient is conserved, and the constant coefficient vector stays
    fixed) before the spectral clipping.
    """
    phi = basis.phi
    n = basis.n_points
    a_mat = phi[1:].T @ phi[:-1] / (n - 1)
    a_mat[0, :] = 0.0
    a_mat[:, 0] = 0.0
    a_mat[0, 0] = 1.0
    if stabilize:
        a_mat = stabilize_spectrum(a_mat)
    return ShiftOperator(a_mat, float(tau))


def stabilize_spectrum(a_mat):
    """Clip eigenvalue magnitudes to one so iterated forecasts stay bounded.

    Eigenvalues with modulus above one are rescaled onto the unit circle
    and the matrix reassembled; if the eigenvector matrix is too ill
    conditioned to reassemble faithfully, the whole matrix is rescaled by
    the spectral radius repeatedly (documented fallback for defective
    estimates).
    """
    a_mat = np.asarray(a_mat, dtype=float)
    vals, vecs = np.linalg.eig(a_mat)
    mags = np.abs(vals)
    if np.all(mags <= 1.0 + 1e-12):
        return a_mat
    clipped = np.where(mags > 1.0, vals / mags, vals)
    try:
        out = vecs @ np.diag(clipped) @ np.linalg.inv(vecs)
        out = np.real_if_close(out, tol=1e6)
        if np.iscomplexobj(out):
            out = out.real
        recon = np.max(np.abs(vecs @ np.diag(vals) @ np.linalg.inv(vecs)
                              - a_mat))
        if recon > 1e-6 * max(1.0, np.max(np.abs(a_mat))):
            raise np.linalg.LinAlgError("defective eigenvector matrix")
    except np.linalg.LinAlgError:
        out = a_mat
        for _ in range(100):
            radius = np.max(np.abs(np.linalg.eigvals(out)))
            if radius <= 1.0 + 1e-12:
                break
            out = out / radius
    return out


def evolve(coeffs, shift_op, n_steps):
    """Apply the shift operator ``n_steps`` times to the coefficients."""
    if n_steps < 0:
        raise ConfigurationError("n_steps must be nonnegative")
    a_mat = shift_op.matrix if isinstance(shift_op, ShiftOperator) else \
        np.asarray(shift_op, dtype=float)
    c = np.asarray(coeffs, dtype=float).copy()
    for _ in range(n_steps):
        c = a_mat @ c
    return c


def reconstruct_density(coeffs, basis, return_clip_fraction=False):
    """Pointwise density sum_j c_j phi_j p_eq at the training points.

    Truncated expansions go negative (spectral ringing), so negative
    values are clipped to zero and the result renormalized to unit mass
    under the Monte-Carlo quadrature; the clipped mass fraction is
    available on request.
    """
    raw = (basis.phi @ np.asarray(coeffs, dtype=float)) * basis.p_eq
    clipped = np.clip(raw, 0.0, None)
    clip_mass = float(np.mean((clipped - raw) / basis.p_eq))
    total = float(np.mean(clipped / basis.p_eq))
    if total <= 0:
        raise DomainError("density vanished after clipping")
    out = clipped / total
    if return_clip_fraction:
        return out, clip_mass / max(total, 1e-300)
    return out


def sample_density(coeffs, basis, size, rng):
    """Importance resampling of training points under the density ratio.

    Weights are max(0, sum_j c_j phi_j) at each training point (the
    density over the sampling density), normalized to probabilities.
    """
    if size < 1:
        raise ConfigurationError("need at least one sample")
    ratio = np.clip(basis.phi @ np.asarray(coeffs, dtype=float), 0.0, None)
    total = ratio.sum()
    if total <= 0:
        raise DomainError("all sampling weights vanished")
    idx = rng.choice(basis.n_points, size=size, p=ratio / total)
    return basis.points[idx]


def l1_distance_to(coeffs, basis, reference_values):
    """Monte-Carlo L1 distance between a coefficient density and a reference.

    Both densities are evaluated at the training points; the integral
    weights by 1/p_eq (importance quadrature under the sampling measure).
    """
    dens = reconstruct_density(coeffs, basis)
    ref = np.asarray(reference_values, dtype=float)
    return float(np.mean(np.abs(dens - ref) / basis.p_eq))


def density_moments(coeffs, basis):
    """Mean and covariance of the reconstructed density (MC quadrature)."""
    dens = reconstruct_density(coeffs, basis)
    w = dens / basis.p_eq
    w = w / w.sum()
    mean = w @ basis.points
    centered = basis.points - mean
    cov = (centered * w[:, None]).T @ centered
    return mean, cov


def gaussian_bump_values(basis, center, cov):
    """Evaluate a Gaussian density at the training points."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = center.size
    diff = basis.points - center
    solve = np.linalg.solve(cov, diff.T).T
    norm = math.sqrt((2.0 * math.pi) ** d * np.linalg.det(cov))
    return np.exp(-0.5 * np.sum(diff * solve, axis=1)) / norm
