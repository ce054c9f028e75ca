"""Discrete adjoint of the explicit projection stepper.

Forward step ``k`` (closure ``h`` with parameters ``theta``)::

    u*_k    = u_k + dt (A(u_k) + nu L u_k + h(u_k; theta))
    u_{k+1} = P u*_k                      (P = identity when projection is off)

Backward step, with ``uh`` the adjoint of ``u_{k+1}``::

    lap(ph) = -div(uh) / dt ;  uh* = uh + dt grad(ph)     (= P uh)
    grad_theta += dt * (dh/dtheta)^T uh*
    uh_k = uh* + dt (A'(u_k)^T + nu L + (dh/du)^T) uh*  (+ loss seed at step k)

The sweep is the exact transpose of :func:`tangent_linear`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec
from .solver import (
    FluidState,
    SolverConfig,
    advection_jvp,
    advection_vjp,
    divergence,
    gradient,
    poisson_solve,
    project_velocity,
    step,
    vector_laplacian,
)


@dataclass
class Trajectory:
    """Dense forward record of one window: ``W + 1`` states and ``W`` intermediate fields."""

    states: list[FluidState]
    u_stars: list[np.ndarray]
    cfg: SolverConfig

    @property
    def nsteps(self) -> int:
        return len(self.u_stars)

    @property
    def grid(self) -> GridSpec:
        return self.states[0].grid

    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.states])


@dataclass
class AdjointState:
    u_hat: np.ndarray
    p_hat: np.ndarray


@dataclass
class AdjointResult:
    grad_theta: np.ndarray
    u_hat0: np.ndarray
    history: list[AdjointState] = field(default_factory=list)


def forward_window(state0: FluidState, cfg: SolverConfig, nsteps: int) -> Trajectory:
    if nsteps < 1:
        raise ValueError("a window needs at least one step")
    states, stars = [state0], []
    s = state0
    for _ in range(nsteps):
        s, u_star = step(s, cfg, return_star=True)
        states.append(s)
        stars.append(u_star)
    return Trajectory(states, stars, cfg)


# ---------------------------------------------------------------------------
# losses


def align_targets(traj: Trajectory, targets, tol: float | None = None) -> dict[int, np.ndarray]:
    """Map targets onto trajectory step indices.

    ``targets`` is either ``{step_index: field}`` or a sequence of objects with
    ``time`` and ``w`` attributes (coarse targets), matched by time.
    """
    times = traj.times()
    if isinstance(targets, dict):
        out = {}
        for k, w in targets.items():
            if not 0 <= int(k) <= traj.nsteps:
                raise ValueError(f"target step {k} outside the window [0, {traj.nsteps}]")
            out[int(k)] = np.asarray(w)
        return out
    if tol is None:
        tol = 1e-6 * traj.cfg.dt
    out = {}
    for t in targets:
        k = int(np.argmin(np.abs(times - t.time)))
        if abs(times[k] - t.time) > tol:
            raise ValueError(f"target time {t.time:.9g} does not align with any window time")
        out[k] = t.w
    return out


def window_loss(traj: Trajectory, targets) -> float:
    """Squared l2 mismatch summed over compared times and faces."""
    total = 0.0
    for k, w in align_targets(traj, targets).items():
        d = traj.states[k].u - w
        total += float(np.sum(d * d))
    return total


def loss_seeds(traj: Trajectory, targets) -> dict[int, np.ndarray]:
    return {k: 2.0 * (traj.states[k].u - w) for k, w in align_targets(traj, targets).items()}


@dataclass(frozen=True)
class Probe:
    """A point measurement of velocity component ``component`` at ``position`` and ``time``."""

    time: float
    component: int
    position: tuple[float, float, float]
    value: float


def probe_index(grid: GridSpec, probe: Probe) -> tuple[int, int, int]:
    """Nearest face of the probed component (faces of ``u_m`` sit at ``i dx`` along m)."""
    m = probe.component
    if m not in (0, 1, 2):
        raise ValueError("probe component must be 0, 1 or 2")
    idx = []
    for a, x in enumerate(probe.position):
        s = x / grid.dx if a == m else x / grid.dx - 0.5
        idx.append(int(np.floor(s + 0.5)) % grid.n)
    return tuple(idx)


def _probe_steps(traj: Trajectory, probes) -> list[int]:
    times = traj.times()
    tol = 1e-6 * traj.cfg.dt
    steps = []
    for p in probes:
        k = int(np.argmin(np.abs(times - p.time)))
        if abs(times[k] - p.time) > tol:
            raise ValueError(f"probe time {p.time:.9g} does not align with any window time")
        steps.append(k)
    return steps


def sparse_probe_loss(traj: Trajectory, probes) -> float:
    total = 0.0
    for k, p in zip(_probe_steps(traj, probes), probes):
        d = traj.states[k].u[(p.component,) + probe_index(traj.grid, p)] - p.value
        total += d * d
    return float(total)


def probe_seeds(traj: Trajectory, probes) -> dict[int, np.ndarray]:
    seeds: dict[int, np.ndarray] = {}
    for k, p in zip(_probe_steps(traj, probes), probes):
        idx = (p.component,) + probe_index(traj.grid, p)
        g = seeds.setdefault(k, np.zeros_like(traj.states[0].u))
        g[idx] += 2.0 * (traj.states[k].u[idx] - p.value)
    return seeds


# ---------------------------------------------------------------------------
# linearization and its transpose


def _n_params(closure) -> int:
    return 0 if closure is None or not hasattr(closure, "forcing_vjp") else int(np.size(_theta(closure)))


def _theta(closure) -> np.ndarray:
    return np.asarray(closure.theta, dtype=float)


def tangent_linear(traj: Trajectory, du0: np.ndarray, dtheta: np.ndarray | None = None) -> list[np.ndarray]:
    """Forward-mode perturbations ``du_k`` for ``k = 0..W`` along ``(du0, dtheta)``."""
    cfg = traj.cfg
    grid = traj.grid
    dx, dt = grid.dx, cfg.dt
    closure = cfg.closure
    out = [du0]
    du = du0
    for k in range(traj.nsteps):
        s = traj.states[k]
        tend = advection_jvp(s.u, du, dx) + s.nu * vector_laplacian(du, dx)
        if closure is not None:
            if hasattr(closure, "forcing_jvp"):
                tend += closure.forcing_jvp(s.u, du, dtheta, grid)
            else:
                raise TypeError(f"closure {type(closure).__name__} has no linearization")
        du_star = du + dt * tend
        du = project_velocity(du_star, dx) if cfg.projection_enabled else du_star
        out.append(du)
    return out


def adjoint_projection(u_hat: np.ndarray, dt: float, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint pressure solve: ``lap(ph) = -div(uh)/dt`` and ``uh* = uh + dt grad(ph)``."""
    p_hat = poisson_solve(-divergence(u_hat, dx) / dt, dx)
    return u_hat + dt * gradient(p_hat, dx), p_hat


def adjoint_sweep_seeds(traj: Trajectory, seeds: dict[int, np.ndarray], *,
                        keep_history: bool = False) -> AdjointResult:
    """Backward sweep for arbitrary adjoint seeds ``{step_index: d loss / d u_k}``."""
    for k in seeds:
        if not 0 <= k <= traj.nsteps:
            raise ValueError(f"seed step {k} outside the window")
    if len(traj.states) != traj.nsteps + 1:
        raise ValueError("trajectory is missing states")
    cfg = traj.cfg
    grid = traj.grid
    dx, dt = grid.dx, cfg.dt
    closure = cfg.closure
    trainable = closure is not None and hasattr(closure, "forcing_vjp")
    if closure is not None and not trainable:
        raise TypeError(f"closure {type(closure).__name__} has no adjoint")
    grad = np.zeros(_n_params(closure))
    u_hat = np.array(seeds.get(traj.nsteps, np.zeros_like(traj.states[0].u)), dtype=float)
    history = []
    for k in range(traj.nsteps - 1, -1, -1):
        if cfg.projection_enabled:
            u_star_hat, p_hat = adjoint_projection(u_hat, dt, dx)
        else:
            u_star_hat, p_hat = u_hat, np.zeros(grid.shape)
        s = traj.states[k]
        back = advection_vjp(s.u, u_star_hat, dx) + s.nu * vector_laplacian(u_star_hat, dx)
        if trainable:
            gu, gth = closure.forcing_vjp(s.u, u_star_hat, grid)
            back += gu
            grad += dt * gth
        u_hat = u_star_hat + dt * back
        if k in seeds:
            u_hat = u_hat + seeds[k]
        if keep_history:
            history.append(AdjointState(u_hat.copy(), p_hat))
    return AdjointResult(grad, u_hat, history[::-1])


def adjoint_sweep(traj: Trajectory, targets, **kw) -> np.ndarray:
    """Gradient of :func:`window_loss` with respect to the closure parameters."""
    return adjoint_sweep_seeds(traj, loss_seeds(traj, targets), **kw).grad_theta


def window_loss_and_grad(state0: FluidState, cfg: SolverConfig, nsteps: int, targets):
    traj = forward_window(state0, cfg, nsteps)
    res = adjoint_sweep_seeds(traj, loss_seeds(traj, targets))
    return window_loss(traj, targets), res.grad_theta, traj


# ---------------------------------------------------------------------------
# verification


def _rel(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def transpose_test(traj: Trajectory, seed: int = 0) -> dict:
    """``<L (du0, dth), v> == <du0, L^T_u v> + <dth, L^T_theta v>`` for random inputs."""
    rng = np.random.default_rng(seed)
    closure = traj.cfg.closure
    du0 = rng.standard_normal(traj.states[0].u.shape)
    n_th = _n_params(closure)
    dth = rng.standard_normal(n_th) if n_th else None
    v = rng.standard_normal(du0.shape)
    du_end = tangent_linear(traj, du0, dth)[-1]
    lhs = float(np.sum(du_end * v))
    res = adjoint_sweep_seeds(traj, {traj.nsteps: v})
    rhs = float(np.sum(du0 * res.u_hat0))
    if n_th:
        rhs += float(res.grad_theta @ dth)
    return {"lhs": lhs, "rhs": rhs, "rel_error": _rel(lhs, rhs)}


def gradient_check(state0: FluidState, cfg: SolverConfig, nsteps: int, targets, *,
                   steps=(1e-4, 1e-5, 1e-6, 1e-7, 1e-8), seed: int = 0) -> dict:
    """Dot-product test of the parameter gradient against central differences.

    Returns the adjoint directional derivative, the finite-difference values and
    errors for every step size (the V-shaped curve), the best relative and absolute
    errors, and the transpose-test result.
    """
    closure = cfg.closure
    if closure is None or not hasattr(closure, "with_params"):
        raise TypeError("gradient_check needs a trainable closure")
    rng = np.random.default_rng(seed)
    theta = _theta(closure)
    direction = rng.standard_normal(theta.shape)
    direction /= np.linalg.norm(direction)

    traj = forward_window(state0, cfg, nsteps)
    grad = adjoint_sweep(traj, targets)
    adj = float(grad @ direction)

    def loss_at(th):
        c = SolverConfig(cfg.dt, cfg.poisson_tol, cfg.projection_enabled,
                         closure.with_params(th), cfg.blowup_bound)
        return window_loss(forward_window(state0, c, nsteps), targets)

    rows = []
    for h in steps:
        fd = (loss_at(theta + h * direction) - loss_at(theta - h * direction)) / (2.0 * h)
        rows.append({"step": h, "fd": fd, "abs_error": abs(fd - adj), "rel_error": _rel(fd, adj)})
    return {
        "adjoint": adj,
        "rows": rows,
        "best_rel_error": min(r["rel_error"] for r in rows),
        "best_abs_error": min(r["abs_error"] for r in rows),
        "transpose": transpose_test(traj, seed),
    }
