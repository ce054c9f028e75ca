"""Viscous Burgers equation with a neural forcing, and two adjoints of it.

    u_t = nu u_xx - u u_x + h_theta(u, u_x, u_xx)

Forward: explicit Euler, divergence-form advection ``-(u[i+1]^2 - u[i-1]^2) / (4 dx)``,
central first and second differences. The closure is the gated network with
inputs ``(u, u_x, u_xx)`` at each point (D=3, K=1).

The loss is ``J = sum_{compared k} dx * sum_i (u_k,i - V_k,i)^2``.

* :func:`burgers_discrete_adjoint` is the exact transpose of the forward scheme.
* :func:`burgers_continuous_adjoint` discretizes the adjoint PDE

      -uh_t = uh dF/du - d/dx[uh dF/dv] + d2/dx2[uh dF/dw]

  with ``F = nu w - u v + h``, terminal value ``2 (u - V)``, jumps of the same
  form at interior compared times, and the gradient integral evaluated by the
  trapezoid rule in time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .network import NetParams, net_backward, net_forward, net_jvp, xavier_init
from .solver import SolverBlowUp


@dataclass
class Line1DState:
    u: np.ndarray
    time: float = 0.0
    viscosity: float = 0.1
    length: float = 2.0 * np.pi

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        if not np.all(np.isfinite(self.u)):
            raise ValueError("state must be finite")
        if not self.viscosity >= 0:
            raise ValueError("viscosity must be nonnegative")

    @property
    def n(self) -> int:
        return self.u.size

    @property
    def dx(self) -> float:
        return self.length / self.n

    def x(self) -> np.ndarray:
        return np.arange(self.n) * self.dx


def _dc(f, dx):
    return (np.roll(f, -1) - np.roll(f, 1)) / (2.0 * dx)


def _d2(f, dx):
    return (np.roll(f, -1) - 2.0 * f + np.roll(f, 1)) / dx**2


def burgers_features(u: np.ndarray, dx: float) -> np.ndarray:
    return np.stack([u, _dc(u, dx), _d2(u, dx)], axis=1)


def _features_T(G: np.ndarray, dx: float) -> np.ndarray:
    return G[:, 0] - _dc(G[:, 1], dx) + _d2(G[:, 2], dx)


def burgers_rhs(u: np.ndarray, dx: float, nu: float, params: NetParams | None = None) -> np.ndarray:
    adv = -(np.roll(u, -1) ** 2 - np.roll(u, 1) ** 2) / (4.0 * dx)
    out = adv + nu * _d2(u, dx)
    if params is not None:
        out = out + net_forward(params, burgers_features(u, dx))[:, 0]
    return out


def stable_dt(state: Line1DState, safety: float = 0.5) -> float:
    """Explicit bound ``safety * min(dx^2 / (2 nu), dx / max|u|)``."""
    dx = state.dx
    bounds = []
    if state.viscosity > 0:
        bounds.append(dx * dx / (2.0 * state.viscosity))
    umax = float(np.max(np.abs(state.u)))
    if umax > 0:
        bounds.append(dx / umax)
    if not bounds:
        raise ValueError("no stability bound for a zero inviscid state")
    return safety * min(bounds)


def burgers_step(state: Line1DState, params: NetParams | None, dt: float,
                 blowup_bound: float = np.inf) -> Line1DState:
    u = state.u + dt * burgers_rhs(state.u, state.dx, state.viscosity, params)
    umax = float(np.max(np.abs(u)))
    if not np.isfinite(umax) or umax > blowup_bound:
        raise SolverBlowUp(state.time + dt, umax)
    return replace(state, u=u, time=state.time + dt)


def burgers_forward(state0: Line1DState, params: NetParams | None, dt: float, nsteps: int) -> list[Line1DState]:
    traj = [state0]
    for _ in range(nsteps):
        traj.append(burgers_step(traj[-1], params, dt))
    return traj


def burgers_loss(traj: list[Line1DState], targets: dict[int, np.ndarray]) -> float:
    dx = traj[0].dx
    return float(sum(dx * np.sum((traj[k].u - V) ** 2) for k, V in targets.items()))


def _check_targets(traj, targets):
    for k in targets:
        if not 0 <= k < len(traj):
            raise ValueError(f"target step {k} outside the trajectory")


def burgers_discrete_adjoint(traj: list[Line1DState], params: NetParams | None, targets: dict[int, np.ndarray],
                             dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of :func:`burgers_loss`; returns ``(grad_theta, d loss / d u_0)``."""
    _check_targets(traj, targets)
    dx = traj[0].dx
    nu = traj[0].viscosity
    N = len(traj) - 1
    grad = np.zeros(0 if params is None else params.theta.size)
    lam = np.zeros(traj[0].n)
    for k in range(N, -1, -1):
        if k < N:
            u = traj[k].u
            back = u * _dc(lam, dx) + nu * _d2(lam, dx)
            if params is not None:
                gth, gz = net_backward(params, burgers_features(u, dx), lam[:, None])
                grad += dt * gth
                back += _features_T(gz, dx)
            lam = lam + dt * back
        if k in targets:
            lam = lam + 2.0 * dx * (traj[k].u - targets[k])
    return grad, lam


def _net_partials(params: NetParams, u: np.ndarray, dx: float) -> np.ndarray:
    """Pointwise ``(dh/du, dh/dv, dh/dw)`` of the network, shape (n, 3)."""
    Z = burgers_features(u, dx)
    _, cache = net_forward(params, Z, cache=True)
    cols = []
    for j in range(3):
        dz = np.zeros_like(Z)
        dz[:, j] = 1.0
        cols.append(net_jvp(params, Z, dz, None, cache=cache)[:, 0])
    return np.stack(cols, axis=1)


def burgers_continuous_adjoint(traj: list[Line1DState], params: NetParams | None, targets: dict[int, np.ndarray],
                               dt: float) -> np.ndarray:
    """Gradient from a direct discretization of the continuous adjoint PDE."""
    _check_targets(traj, targets)
    dx = traj[0].dx
    nu = traj[0].viscosity
    N = len(traj) - 1
    grad = np.zeros(0 if params is None else params.theta.size)
    if params is None:
        return grad

    def integrand(k, uh):
        gth, _ = net_backward(params, burgers_features(traj[k].u, dx), uh[:, None])
        return dx * gth

    uh = np.zeros(traj[0].n)
    if N in targets:
        uh = 2.0 * (traj[N].u - targets[N])
    for k in range(N - 1, -1, -1):
        u = traj[k].u
        hp = _net_partials(params, u, dx)
        a_u = -_dc(u, dx) + hp[:, 0]
        a_v = -u + hp[:, 1]
        a_w = nu + hp[:, 2]
        rhs = uh * a_u - _dc(uh * a_v, dx) + _d2(uh * a_w, dx)
        upper = integrand(k + 1, uh)          # uh at t_{k+1}^- (after its jump)
        uh = uh + dt * rhs                     # uh at t_k^+
        grad += 0.5 * dt * (upper + integrand(k, uh))
        if k in targets and k > 0:
            uh = uh + 2.0 * (traj[k].u - targets[k])
    return grad


def sine_state(n: int, amplitude: float = 1.0, viscosity: float = 0.1, length: float = 2.0 * np.pi,
               mode: int = 1) -> Line1DState:
    x = np.arange(n) * length / n
    return Line1DState(amplitude * np.sin(2.0 * np.pi * mode * x / length), 0.0, viscosity, length)


def burgers_gradcheck(n: int = 64, nsteps: int = 20, N_H: int = 4, seed: int = 0,
                      steps=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6)) -> dict:
    """Dot-product test of the discrete adjoint against fourth-order central differences."""
    rng = np.random.default_rng(seed)
    state0 = Line1DState(np.sin(np.arange(n) * 2 * np.pi / n) + 0.3 * np.cos(3 * np.arange(n) * 2 * np.pi / n),
                         viscosity=0.05)
    params = xavier_init(3, N_H, 1, seed)
    params.theta[...] *= 0.5
    dt = stable_dt(state0, 0.4)
    targets = {nsteps // 2: rng.standard_normal(n) * 0.1, nsteps: rng.standard_normal(n) * 0.1}
    traj = burgers_forward(state0, params, dt, nsteps)
    grad, _ = burgers_discrete_adjoint(traj, params, targets, dt)
    d = rng.standard_normal(grad.size)
    d /= np.linalg.norm(d)
    adj = float(grad @ d)

    def J(th):
        return burgers_loss(burgers_forward(state0, params.with_theta(th), dt, nsteps), targets)

    rows = []
    for h in steps:
        # fourth-order central difference
        th = params.theta
        fd = (8.0 * (J(th + h * d) - J(th - h * d)) - (J(th + 2 * h * d) - J(th - 2 * h * d))) / (12.0 * h)
        rel = abs(fd - adj) / max(abs(fd), abs(adj), 1e-300)
        rows.append({"step": h, "fd": fd, "rel_error": rel})
    return {"adjoint": adj, "rows": rows, "best_rel_error": min(r["rel_error"] for r in rows),
            "n": n, "nsteps": nsteps, "N_H": N_H}
