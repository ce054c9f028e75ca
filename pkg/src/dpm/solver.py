"""Explicit operator-split incompressible Navier-Stokes stepper on the MAC grid.

One step is

    u* = u + dt * (A(u) + h(u))
    lap(p) = div(u*) / dt
    u_new = u* - dt * grad(p)

where ``A`` is second-order central advection (divergence form) plus viscous
diffusion and ``h`` is an optional closure forcing. The same scheme is used for
DNS and LES so that the adjoint module can differentiate the true forward map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np

from .grid import GridSpec, face_to_center, shift


class SolverBlowUp(RuntimeError):
    """Raised when the velocity exceeds the configured bound."""

    def __init__(self, time: float, umax: float):
        super().__init__(f"velocity blow-up at t={time:.6g} (max |u| = {umax:.3g})")
        self.time = time
        self.umax = umax


@dataclass
class FluidState:
    grid: GridSpec
    u: np.ndarray
    p: np.ndarray
    time: float = 0.0
    viscosity: float = 1.0
    density: float = 1.0

    @property
    def nu(self) -> float:
        return self.viscosity / self.density

    def copy(self) -> "FluidState":
        return replace(self, u=self.u.copy(), p=self.p.copy())


@dataclass
class SolverConfig:
    dt: float
    poisson_tol: float = 1e-9
    projection_enabled: bool = True
    closure: Optional[Any] = None
    blowup_bound: float = np.inf

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.poisson_tol < np.finfo(float).eps:
            raise ValueError("poisson_tol must be at least machine epsilon")


# ---------------------------------------------------------------------------
# discrete operators


def divergence(u: np.ndarray, dx: float) -> np.ndarray:
    """Cell-center divergence: sum_m (u_m[i+1] - u_m[i]) / dx."""
    return sum(shift(u[m], 1, m) - u[m] for m in range(3)) / dx


def gradient(p: np.ndarray, dx: float) -> np.ndarray:
    """Face gradient of a center field, (p[i] - p[i-1]) / dx. Equals -divergence^T."""
    return np.stack([(p - shift(p, -1, m)) / dx for m in range(3)])


def laplacian(p: np.ndarray, dx: float) -> np.ndarray:
    """7-point Laplacian, identical to divergence(gradient(p))."""
    out = -6.0 * p
    for m in range(3):
        out = out + shift(p, 1, m) + shift(p, -1, m)
    return out / dx**2


_EIG_CACHE: dict[tuple[int, float], np.ndarray] = {}


def _laplacian_eigenvalues(n: int, dx: float) -> np.ndarray:
    key = (n, dx)
    if key not in _EIG_CACHE:
        k = np.arange(n)
        lam = (2.0 * np.cos(2.0 * np.pi * k / n) - 2.0) / dx**2
        kr = np.arange(n // 2 + 1)
        lam_r = (2.0 * np.cos(2.0 * np.pi * kr / n) - 2.0) / dx**2
        eig = lam[:, None, None] + lam[None, :, None] + lam_r[None, None, :]
        eig[0, 0, 0] = 1.0
        _EIG_CACHE[key] = eig
    return _EIG_CACHE[key]


def poisson_solve(rhs: np.ndarray, dx: float) -> np.ndarray:
    """Solve the periodic 7-point Poisson equation exactly in Fourier space.

    The mean of ``rhs`` is discarded (compatibility) and the solution has zero mean.
    """
    n = rhs.shape[0]
    rhs_hat = np.fft.rfftn(rhs)
    phi_hat = rhs_hat / _laplacian_eigenvalues(n, dx)
    phi_hat[0, 0, 0] = 0.0
    return np.fft.irfftn(phi_hat, s=rhs.shape, axes=(0, 1, 2))


def project(u_star: np.ndarray, dt: float, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """Pressure projection; returns the divergence-free velocity and the pressure."""
    p = poisson_solve(divergence(u_star, dx) / dt, dx)
    return u_star - dt * gradient(p, dx), p


def project_velocity(u: np.ndarray, dx: float) -> np.ndarray:
    """The orthogonal projector onto discretely divergence-free fields (symmetric)."""
    lam = poisson_solve(divergence(u, dx), dx)
    return u - gradient(lam, dx)


# ---------------------------------------------------------------------------
# advection / diffusion


def _avg_lo(f: np.ndarray, axis: int) -> np.ndarray:
    """(f[i-1] + f[i]) / 2 along axis."""
    return 0.5 * (f + shift(f, -1, axis))


def _avg_lo_T(f: np.ndarray, axis: int) -> np.ndarray:
    return 0.5 * (f + shift(f, 1, axis))


def _avg_hi(f: np.ndarray, axis: int) -> np.ndarray:
    """(f[i] + f[i+1]) / 2 along axis."""
    return 0.5 * (f + shift(f, 1, axis))


def _avg_hi_T(f: np.ndarray, axis: int) -> np.ndarray:
    return 0.5 * (f + shift(f, -1, axis))


def _diff_lo(f: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """(f[i] - f[i-1]) / dx."""
    return (f - shift(f, -1, axis)) / dx


def _diff_lo_T(f: np.ndarray, axis: int, dx: float) -> np.ndarray:
    return (f - shift(f, 1, axis)) / dx


def _diff_hi(f: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """(f[i+1] - f[i]) / dx."""
    return (shift(f, 1, axis) - f) / dx


def _diff_hi_T(f: np.ndarray, axis: int, dx: float) -> np.ndarray:
    return (shift(f, -1, axis) - f) / dx


def _flux_factors(u: np.ndarray, m: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated factors whose product is the u_m u_j momentum flux.

    For j == m the flux lives at cell centers, otherwise on the (m, j) edges.
    """
    if j == m:
        a = _avg_hi(u[m], m)
        return a, a
    return _avg_lo(u[m], j), _avg_lo(u[j], m)


def _flux_divergence(flux: np.ndarray, m: int, j: int, dx: float) -> np.ndarray:
    return _diff_lo(flux, m, dx) if j == m else _diff_hi(flux, j, dx)


def _flux_divergence_T(g: np.ndarray, m: int, j: int, dx: float) -> np.ndarray:
    return _diff_lo_T(g, m, dx) if j == m else _diff_hi_T(g, j, dx)


def advection(u: np.ndarray, dx: float) -> np.ndarray:
    """-d(u_m u_j)/dx_j on the faces of component m, divergence form."""
    out = np.zeros_like(u)
    for m in range(3):
        for j in range(3):
            a, b = _flux_factors(u, m, j)
            out[m] -= _flux_divergence(a * b, m, j, dx)
    return out


def advection_jvp(u: np.ndarray, du: np.ndarray, dx: float) -> np.ndarray:
    """Linearization of :func:`advection` at ``u`` applied to ``du``."""
    out = np.zeros_like(u)
    for m in range(3):
        for j in range(3):
            a, b = _flux_factors(u, m, j)
            da, db = _flux_factors(du, m, j)
            out[m] -= _flux_divergence(a * db + da * b, m, j, dx)
    return out


def advection_vjp(u: np.ndarray, v: np.ndarray, dx: float) -> np.ndarray:
    """Transpose of :func:`advection_jvp` applied to the face field ``v``."""
    out = np.zeros_like(u)
    for m in range(3):
        for j in range(3):
            g = -_flux_divergence_T(v[m], m, j, dx)
            if j == m:
                a = _avg_hi(u[m], m)
                out[m] += _avg_hi_T(2.0 * a * g, m)
            else:
                a, b = _flux_factors(u, m, j)
                out[m] += _avg_lo_T(g * b, j)
                out[j] += _avg_lo_T(g * a, m)
    return out


def vector_laplacian(u: np.ndarray, dx: float) -> np.ndarray:
    """Componentwise 7-point Laplacian (self-adjoint)."""
    return np.stack([laplacian(u[m], dx) for m in range(3)])


def rhs_advect_diffuse(state: FluidState) -> np.ndarray:
    """Advection plus viscous diffusion tendency, pressure excluded."""
    dx = state.grid.dx
    return advection(state.u, dx) + state.nu * vector_laplacian(state.u, dx)


# ---------------------------------------------------------------------------
# time stepping


def closure_forcing(closure, u: np.ndarray, grid: GridSpec) -> Optional[np.ndarray]:
    if closure is None:
        return None
    return closure.forcing(u, grid)


def step(state: FluidState, cfg: SolverConfig, *, return_star: bool = False):
    """Advance one explicit step. Pure: ``state`` is not modified."""
    dx = state.grid.dx
    tend = rhs_advect_diffuse(state)
    h = closure_forcing(cfg.closure, state.u, state.grid)
    if h is not None:
        tend += h
    u_star = state.u + cfg.dt * tend
    if cfg.projection_enabled:
        u_new, p_new = project(u_star, cfg.dt, dx)
    else:
        u_new, p_new = u_star, state.p.copy()
    umax = float(np.max(np.abs(u_new)))
    if not np.isfinite(umax) or umax > cfg.blowup_bound:
        raise SolverBlowUp(state.time + cfg.dt, umax)
    new = replace(state, u=u_new, p=p_new, time=state.time + cfg.dt)
    return (new, u_star) if return_star else new


def run(state: FluidState, cfg: SolverConfig, nsteps: int) -> FluidState:
    for _ in range(nsteps):
        state = step(state, cfg)
    return state


def cfl_time_step(u: np.ndarray, dx: float, cfl: float = 0.4) -> float:
    """Time step giving the requested convective CFL number max|u| dt / dx."""
    umax = float(np.max(np.abs(u)))
    if umax == 0:
        raise ValueError("cannot derive a CFL time step from a zero velocity field")
    return cfl * dx / umax


def u_rms(u: np.ndarray) -> float:
    """<u_i u_i>^(1/2) over face values."""
    return float(np.sqrt(np.mean(np.sum(u * u, axis=0))))


def init_isotropic(
    grid: GridSpec,
    target_urms: float,
    peak_wavenumber: float,
    seed: int,
    viscosity: float = 1.0,
    density: float = 1.0,
) -> FluidState:
    """Random-phase solenoidal field with a Passot-Pouquet spectrum.

    ``peak_wavenumber`` is in units of the fundamental wavenumber 2*pi/L.
    """
    if not target_urms > 0:
        raise ValueError("target_urms must be positive")
    if not 0 < peak_wavenumber < grid.n / 2:
        raise ValueError("peak wavenumber must be resolvable (< n/2 modes)")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((3,) + grid.shape)
    kmag = np.fft.fftfreq(grid.n, d=1.0 / grid.n)
    kx, ky, kz = np.meshgrid(kmag, kmag, kmag, indexing="ij")
    k = np.sqrt(kx**2 + ky**2 + kz**2)
    kp = float(peak_wavenumber)
    energy = k**4 * np.exp(-2.0 * (k / kp) ** 2)
    # white noise has flat power per mode; shells hold ~4 pi k^2 modes
    with np.errstate(divide="ignore", invalid="ignore"):
        amp = np.where(k > 0, np.sqrt(energy) / np.where(k > 0, k, 1.0), 0.0)
    u = np.stack([np.fft.ifftn(np.fft.fftn(noise[m]) * amp).real for m in range(3)])
    u = project_velocity(u, grid.dx)
    u *= target_urms / u_rms(u)
    return FluidState(grid=grid, u=u, p=grid.zeros_scalar(), time=0.0,
                      viscosity=viscosity, density=density)


def vorticity_magnitude(u: np.ndarray, dx: float) -> np.ndarray:
    """|curl u| at cell centers from centered velocities and central differences."""
    c = face_to_center(u)

    def d(f, axis):
        return (shift(f, 1, axis) - shift(f, -1, axis)) / (2.0 * dx)

    wx = d(c[2], 1) - d(c[1], 2)
    wy = d(c[0], 2) - d(c[2], 0)
    wz = d(c[1], 0) - d(c[0], 1)
    return np.sqrt(wx**2 + wy**2 + wz**2)


def dissipation_rate(state: FluidState) -> float:
    """Viscous dissipation of the discrete scheme, -nu <u . lap(u)>."""
    lap = vector_laplacian(state.u, state.grid.dx)
    return -state.nu * float(np.mean(np.sum(state.u * lap, axis=0)))
