"""Test dynamical systems and the integrators that generate truth runs.

Five systems are supported: Lorenz-63, single-layer Lorenz-96 with a
tunable damping coefficient, the two-layer Lorenz-96 fast/slow system,
a linear two-scale SDE, and the stochastically parameterized complex
scalar test system (SPEKF dynamics).  Deterministic systems integrate
with classical RK4, stochastic ones with Euler-Maruyama.

All drift functions are pure and accept batched states: the state lives
on the last axis, anything in front (ensemble members, sample clouds)
broadcasts through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DomainError, IntegrationBlowup

L63_SIGMA, L63_RHO, L63_BETA = 10.0, 28.0, 8.0 / 3.0


class SystemId(Enum):
    L63 = "l63"
    L96 = "l96"
    L96_TWO_LAYER = "l96_two_layer"
    LINEAR_TWO_SCALE = "linear_two_scale"
    SPEKF = "spekf"


@dataclass(frozen=True)
class SystemSpec:
    """Description of one test system: identity, parameters, dimensions."""

    id: SystemId
    params: dict
    dim_slow: int
    dim_fast: int = 0
    stochastic: bool = False

    @property
    def dim(self):
        return self.dim_slow + self.dim_fast


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered states sampled at a fixed step ``dt``."""

    states: np.ndarray  # (n_samples, dim)
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        if self.states.ndim != 2:
            raise ConfigurationError("trajectory states must be 2-d (time, dim)")
        if self.dt <= 0:
            raise ConfigurationError("trajectory dt must be positive")

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.states.shape[0])

    def __len__(self):
        return self.states.shape[0]


# ---------------------------------------------------------------------------
# drift / diffusion definitions
# ---------------------------------------------------------------------------

def l63_drift(state, sigma=L63_SIGMA, rho=L63_RHO, beta=L63_BETA):
    """Lorenz-63 right-hand side (sigma(y-x), rho*x - y - xz, xy - beta*z)."""
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != 3:
        raise DomainError("Lorenz-63 state must have 3 components")
    if not np.all(np.isfinite(state)):
        raise DomainError("non-finite Lorenz-63 state")
    x, y, z = state[..., 0], state[..., 1], state[..., 2]
    return np.stack(
        [sigma * (y - x), rho * x - y - x * z, x * y - beta * z], axis=-1
    )


def l96_drift(x, theta=1.0, forcing=8.0):
    """Lorenz-96 with damping coefficient ``theta``: (x_{j+1}-x_{j-2})x_{j-1} - theta*x_j + F."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise ConfigurationError("Lorenz-96 needs at least 4 grid points")
    xm2 = np.roll(x, 2, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    return (xp1 - xm2) * xm1 - theta * x + forcing


def l96_theta_advection_drift(x, theta, forcing=8.0):
    """Lorenz-96 variant with the advection term scaled by ``theta``.

    Component j reads theta*x_{j+1}x_{j-1} - x_{j-2}x_{j-1} - x_j + F, which
    coincides with the standard model at theta=1.  ``theta`` may be a scalar
    or one value per batched row.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 4:
        raise ConfigurationError("Lorenz-96 needs at least 4 grid points")
    theta = np.asarray(theta, dtype=float)
    if theta.ndim > 0:
        theta = theta[..., None]
    xm2 = np.roll(x, 2, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    return theta * xp1 * xm1 - xm2 * xm1 - x + forcing


def l96_two_layer_drift(z, n_slow=8, n_fast_per_site=32, eps=0.25,
                        forcing=20.0, a=10.0, h_x=-0.4, h_y=0.1):
    """Two-layer Lorenz-96: slow sites coupled to a fast ring.

    Slow component i:
        x_{i-1}(x_{i+1} - x_{i-2}) - x_i + F + h_x * sum of its J fast modes
    Fast component j (1/eps time scale):
        (a y_{j+1}(y_{j-1} - y_{j+2}) - y_j + h_y x_{site(j)}) / eps
    Both index rings are periodic; fast mode j belongs to slow site ceil(j/J).
    """
    if eps <= 0:
        raise ConfigurationError("two-layer Lorenz-96 needs eps > 0")
    z = np.asarray(z, dtype=float)
    n, j = n_slow, n_fast_per_site
    if z.shape[-1] != n * (j + 1):
        raise ConfigurationError(
            f"state must have N(J+1) = {n * (j + 1)} components, got {z.shape[-1]}"
        )
    x = z[..., :n]
    y = z[..., n:]

    xm2 = np.roll(x, 2, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    coupling = h_x * y.reshape(y.shape[:-1] + (n, j)).sum(axis=-1)
    dx = xm1 * (xp1 - xm2) - x + forcing + coupling

    ym1 = np.roll(y, 1, axis=-1)
    yp1 = np.roll(y, -1, axis=-1)
    yp2 = np.roll(y, -2, axis=-1)
    x_site = np.repeat(x, j, axis=-1)
    dy = (a * yp1 * (ym1 - yp2) - y + h_y * x_site) / eps

    return np.concatenate([dx, dy], axis=-1)


def linear_two_scale_drift_diffusion(state, a11, a12, a21, a22, eps,
                                     sigma_x, sigma_y):
    """Drift and diagonal diffusion of the linear fast/slow SDE pair.

    Returns ``(drift, diag)`` with drift (a11 x + a12 y, (a21 x + a22 y)/eps)
    and noise amplitudes (sigma_x, sigma_y/sqrt(eps)).
    """
    state = np.asarray(state, dtype=float)
    x, y = state[..., 0], state[..., 1]
    drift = np.stack([a11 * x + a12 * y, (a21 * x + a22 * y) / eps], axis=-1)
    diag = np.array([sigma_x, sigma_y / math.sqrt(eps)])
    return drift, diag


def spekf_drift_diffusion(state, p, t=0.0):
    """Drift and noise amplitudes of the complex scalar (x, b, gamma) system.

    ``state`` holds complex x, complex additive bias b, real multiplicative
    damping perturbation gamma.  ``p`` carries the system parameters
    (see :class:`moderr.spekf.SpekfParams`).  Returns a complex drift triple
    and the real noise amplitudes (sigma_x, sigma_b/sqrt(eps),
    sigma_gamma/sqrt(eps)); the first two force complex Wiener processes,
    the last one a real process.
    """
    if p.eps <= 0 or p.d_gamma <= 0:
        raise ConfigurationError("SPEKF needs eps > 0 and d_gamma > 0")
    state = np.asarray(state, dtype=complex)
    x, b, g = state[..., 0], state[..., 1], state[..., 2]
    lam_hat = p.gamma_hat - 1j * p.omega
    lam_b = p.gamma_b - 1j * p.omega_b
    force = p.forcing(t) if callable(p.forcing) else p.forcing
    dx = -(g + lam_hat) * x + b + force
    db = -(lam_b / p.eps) * b
    dg = -(p.d_gamma / p.eps) * g.real + 0j
    drift = np.stack([dx, db, dg], axis=-1)
    diag = np.array(
        [p.sigma_x, p.sigma_b / math.sqrt(p.eps), p.sigma_gamma / math.sqrt(p.eps)]
    )
    return drift, diag


# ---------------------------------------------------------------------------
# system factories (validate invariants once, at configuration time)
# ---------------------------------------------------------------------------

def l63_system(sigma=L63_SIGMA, rho=L63_RHO, beta=L63_BETA):
    return SystemSpec(SystemId.L63, dict(sigma=sigma, rho=rho, beta=beta), 3)


def l96_system(n=40, theta=1.0, forcing=8.0):
    if n < 4:
        raise ConfigurationError("Lorenz-96 needs at least 4 grid points")
    return SystemSpec(SystemId.L96, dict(n=n, theta=theta, forcing=forcing), n)


def l96_two_layer_system(n_slow=8, n_fast_per_site=32, eps=0.25, forcing=20.0,
                         a=10.0, h_x=-0.4, h_y=0.1):
    if eps <= 0:
        raise ConfigurationError("two-layer Lorenz-96 needs eps > 0")
    params = dict(n_slow=n_slow, n_fast_per_site=n_fast_per_site, eps=eps,
                  forcing=forcing, a=a, h_x=h_x, h_y=h_y)
    return SystemSpec(SystemId.L96_TWO_LAYER, params, n_slow,
                      n_slow * n_fast_per_site)


def linear_two_scale_system(a11, a12, a21, a22, eps, sigma_x, sigma_y):
    if eps <= 0:
        raise ConfigurationError("linear two-scale system needs eps > 0")
    if sigma_x < 0 or sigma_y < 0:
        raise ConfigurationError("noise amplitudes must be nonnegative")
    a_full = np.array([[a11, a12], [a21 / eps, a22 / eps]])
    if np.any(np.linalg.eigvals(a_full).real >= 0):
        raise ConfigurationError("drift matrix must have strictly stable eigenvalues")
    if a11 - a12 * a21 / a22 >= 0:
        raise ConfigurationError("averaged slow coefficient must be negative")
    params = dict(a11=a11, a12=a12, a21=a21, a22=a22, eps=eps,
                  sigma_x=sigma_x, sigma_y=sigma_y)
    return SystemSpec(SystemId.LINEAR_TWO_SCALE, params, 1, 1, stochastic=True)


def spekf_system(p):
    """Wrap :class:`moderr.spekf.SpekfParams` ``p`` as a SystemSpec."""
    if p.eps <= 0 or p.d_gamma <= 0:
        raise ConfigurationError("SPEKF needs eps > 0 and d_gamma > 0")
    # slow block: observed x; fast block: hidden (b, gamma)
    return SystemSpec(SystemId.SPEKF, dict(p=p), 1, 2, stochastic=True)


def drift_fn(spec):
    """Return the autonomous drift callable f(state, t) for ``spec``."""
    p = spec.params
    if spec.id is SystemId.L63:
        return lambda s, t: l63_drift(s, p["sigma"], p["rho"], p["beta"])
    if spec.id is SystemId.L96:
        return lambda s, t: l96_drift(s, p["theta"], p["forcing"])
    if spec.id is SystemId.L96_TWO_LAYER:
        q = {k: p[k] for k in ("n_slow", "n_fast_per_site", "eps", "forcing",
                               "a", "h_x", "h_y")}
        return lambda s, t: l96_two_layer_drift(s, **q)
    raise ConfigurationError(f"no deterministic drift for {spec.id}")


def sde_fns(spec):
    """Return (drift, diffusion) callables in the real state representation.

    For the SPEKF system the complex triple (x, b, gamma) is represented
    as the real 5-vector (re x, im x, re b, im b, gamma); each complex
    noise channel splits into two real channels of amplitude sigma/sqrt(2)
    so the complex increment keeps the stated variance.
    """
    p = spec.params
    if spec.id is SystemId.LINEAR_TWO_SCALE:
        a11, a12 = p["a11"], p["a12"]
        a21, a22, eps = p["a21"], p["a22"], p["eps"]
        amp = np.array([p["sigma_x"], p["sigma_y"] / math.sqrt(eps)])

        def drift(s, t):
            x, y = s[..., 0], s[..., 1]
            return np.stack([a11 * x + a12 * y, (a21 * x + a22 * y) / eps], -1)

        return drift, lambda s, t: amp

    if spec.id is SystemId.SPEKF:
        return spekf_real_drift_diffusion(p["p"])

    raise ConfigurationError(f"no SDE form for {spec.id}")


def spekf_real_drift_diffusion(p):
    """Real 5-dim (re x, im x, re b, im b, gamma) drift/diffusion pair."""
    ghat, om = p.gamma_hat, p.omega
    gb, omb, eps, dg = p.gamma_b, p.omega_b, p.eps, p.d_gamma
    amp = np.array([
        p.sigma_x / math.sqrt(2.0), p.sigma_x / math.sqrt(2.0),
        p.sigma_b / math.sqrt(2.0 * eps), p.sigma_b / math.sqrt(2.0 * eps),
        p.sigma_gamma / math.sqrt(eps),
    ])

    def drift(s, t):
        xr, xi = s[..., 0], s[..., 1]
        br, bi = s[..., 2], s[..., 3]
        g = s[..., 4]
        force = p.forcing(t) if callable(p.forcing) else p.forcing
        fr, fi = np.real(force), np.imag(force)
        # -(g + gamma_hat - i om)(xr + i xi) + b + f
        dxr = -(g + ghat) * xr - om * xi + br + fr
        dxi = -(g + ghat) * xi + om * xr + bi + fi
        dbr = (-gb * br - omb * bi) / eps
        dbi = (-gb * bi + omb * br) / eps
        dgm = -(dg / eps) * g
        return np.stack([dxr, dxi, dbr, dbi, dgm], axis=-1)

    return drift, lambda s, t: amp


def spekf_complex_to_real(states):
    states = np.asarray(states, dtype=complex)
    return np.stack(
        [states[..., 0].real, states[..., 0].imag,
         states[..., 1].real, states[..., 1].imag,
         states[..., 2].real], axis=-1
    )


def spekf_real_to_complex(states):
    states = np.asarray(states, dtype=float)
    return np.stack(
        [states[..., 0] + 1j * states[..., 1],
         states[..., 2] + 1j * states[..., 3],
         states[..., 4] + 0j], axis=-1
    )


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------

def rk4_step(drift, state, t, h):
    """One classical 4-stage Runge-Kutta step of size ``h``."""
    if h <= 0:
        raise ConfigurationError("rk4_step needs h > 0")
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = drift(state, t)
        k2 = drift(state + 0.5 * h * k1, t + 0.5 * h)
        k3 = drift(state + 0.5 * h * k2, t + 0.5 * h)
        k4 = drift(state + h * k3, t + h)
        out = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowup(t)
    return out


def em_step(drift, diffusion, state, t, h, rng):
    """One Euler-Maruyama step: state + f h + g sqrt(h) xi.

    ``diffusion`` returns per-component noise amplitudes (diagonal).  For
    complex-typed states each component receives an independent complex
    unit-variance increment (real and imaginary normals scaled by
    1/sqrt(2)); real states receive standard normals.
    """
    if h <= 0:
        raise ConfigurationError("em_step needs h > 0")
    state = np.asarray(state)
    g = diffusion(state, t) if callable(diffusion) else np.asarray(diffusion)
    if np.iscomplexobj(state):
        xi = (rng.standard_normal(state.shape)
              + 1j * rng.standard_normal(state.shape)) / math.sqrt(2.0)
    else:
        xi = rng.standard_normal(state.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        out = state + h * drift(state, t) + math.sqrt(h) * g * xi
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowup(t)
    return out


def simulate_trajectory(spec, x0, t_end, h, subsample=1, rng=None,
                        spin_up=10.0):
    """Integrate ``spec`` from ``x0`` and record every ``subsample``-th state.

    Deterministic systems use RK4, stochastic ones Euler-Maruyama with the
    caller's generator.  ``spin_up`` model time units are integrated and
    discarded first so recording starts on the attractor (the recorded
    initial state is the end of spin-up).  Sampling step of the returned
    trajectory is ``h * subsample``.
    """
    if t_end <= 0:
        raise ConfigurationError("t_end must be positive")
    if subsample < 1:
        raise ConfigurationError("subsample must be >= 1")
    if spec.stochastic and rng is None:
        raise ConfigurationError("stochastic systems need an rng")

    complex_out = spec.id is SystemId.SPEKF
    if complex_out:
        state = spekf_complex_to_real(np.asarray(x0, dtype=complex))
    else:
        state = np.array(x0, dtype=float)

    if spec.stochastic:
        f, g = sde_fns(spec)
        step = lambda s, t: em_step(f, g, s, t, h, rng)
    else:
        f = drift_fn(spec)
        step = lambda s, t: rk4_step(f, s, t, h)

    t = 0.0
    n_spin = int(round(spin_up / h))
    for _ in range(n_spin):
        state = step(state, t)
        t += h

    n_steps = int(round(t_end / h))
    n_keep = n_steps // subsample + 1
    out = np.empty((n_keep, state.shape[-1]))
    out[0] = state
    k = 1
    for i in range(1, n_steps + 1):
        state = step(state, t)
        t += h
        if i % subsample == 0:
            out[k] = state
            k += 1
    out = out[:k]

    if complex_out:
        return Trajectory(spekf_real_to_complex(out), h * subsample)
    return Trajectory(out, h * subsample)


def simulate_batch(spec, x0_batch, t_end, h, subsample=1, rng=None,
                   spin_up=10.0):
    """Integrate several independent trajectories of ``spec`` concurrently.

    ``x0_batch`` has one initial state per row; all trajectories share the
    step and schedule, so the drift evaluations vectorize across the
    batch (the per-call overhead of tiny states dominates a serial run).
    Returns an array of shape (batch, n_samples, dim); sampling step is
    ``h * subsample``, spin-up is discarded as in
    :func:`simulate_trajectory`.
    """
    if t_end <= 0 or subsample < 1:
        raise ConfigurationError("t_end must be positive and subsample >= 1")
    if spec.stochastic and rng is None:
        raise ConfigurationError("stochastic systems need an rng")
    if spec.id is SystemId.SPEKF:
        raise ConfigurationError("use the spekf module for batched runs")
    state = np.atleast_2d(np.array(x0_batch, dtype=float))

    if spec.stochastic:
        f, g = sde_fns(spec)
        step = lambda s, t: em_step(f, g, s, t, h, rng)
    else:
        f = drift_fn(spec)
        step = lambda s, t: rk4_step(f, s, t, h)

    t = 0.0
    for _ in range(int(round(spin_up / h))):
        state = step(state, t)
        t += h
    n_steps = int(round(t_end / h))
    out = np.empty((state.shape[0], n_steps // subsample + 1, state.shape[1]))
    out[:, 0] = state
    k = 1
    for i in range(1, n_steps + 1):
        state = step(state, t)
        t += h
        if i % subsample == 0:
            out[:, k] = state
            k += 1
    return out[:, :k]


def generate_observations(traj, obs_op, noise_cov, dt_obs, rng):
    """Noisy observations v_m = h(x(t_m)) + eta_m, eta ~ N(0, R).

    ``obs_op`` is an (m, d) matrix or a callable applied row-wise;
    ``dt_obs`` must be an integer multiple of the trajectory sampling step.
    Observation times start one interval after the trajectory start.
    Returns ``(times, values)``.
    """
    ratio = dt_obs / traj.dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ConfigurationError(
            f"dt_obs={dt_obs} is not an integer multiple of the sampling step {traj.dt}"
        )
    states = traj.states[stride::stride]
    times = traj.times[stride::stride]
    if callable(obs_op):
        clean = np.asarray([obs_op(s) for s in states])
    else:
        h_mat = np.asarray(obs_op, dtype=float)
        clean = states @ h_mat.T
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if noise_cov.shape[0] != noise_cov.shape[1] or noise_cov.shape[0] != clean.shape[1]:
        raise ConfigurationError("observation noise covariance shape mismatch")
    if not np.allclose(noise_cov, noise_cov.T):
        raise ConfigurationError("observation noise covariance must be symmetric")
    if np.any(noise_cov.diagonal() < 0):
        raise ConfigurationError("observation noise variances must be nonnegative")
    if np.all(noise_cov == 0.0):
        return times, clean
    chol = np.linalg.cholesky(
        noise_cov + 1e-300 * np.eye(noise_cov.shape[0])
    )
    noise = rng.standard_normal(clean.shape) @ chol.T
    return times, clean + noise
