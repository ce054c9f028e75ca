"""Sub-grid closures. Every closure maps an LES velocity to a face forcing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, face_to_center, shift


# ---------------------------------------------------------------------------
# cell-centered tensors -> face forcing


def _cdiff(f: np.ndarray, axis: int, dx: float) -> np.ndarray:
    return (shift(f, 1, axis) - shift(f, -1, axis)) / (2.0 * dx)


def tensor_face_divergence(tau: np.ndarray, dx: float) -> np.ndarray:
    """Face-located ``d tau_mj / dx_j`` of a cell-center tensor ``tau[m, j]``.

    Diagonal terms use the compact difference across the face; off-diagonal
    terms are averaged onto the face and differenced centrally.
    """
    out = np.zeros((3,) + tau.shape[2:])
    for m in range(3):
        for j in range(3):
            t = tau[m, j]
            if j == m:
                out[m] += (t - shift(t, -1, m)) / dx
            else:
                out[m] += _cdiff(0.5 * (t + shift(t, -1, m)), j, dx)
    return out


def tensor_face_divergence_T(f: np.ndarray, dx: float) -> np.ndarray:
    """Transpose of :func:`tensor_face_divergence`."""
    out = np.zeros((3, 3) + f.shape[1:])
    for m in range(3):
        for j in range(3):
            if j == m:
                out[m, j] = (f[m] - shift(f[m], 1, m)) / dx
            else:
                g = -_cdiff(f[m], j, dx)
                out[m, j] = 0.5 * (g + shift(g, 1, m))
    return out


def strain_rate(u: np.ndarray, dx: float) -> np.ndarray:
    """Resolved strain tensor at cell centers, shape ``(3, 3, n, n, n)``.

    Diagonal entries are compact differences at centers. Off-diagonal entries are
    formed on cell edges and averaged over the four edges around each center.
    """
    n3 = u.shape[1:]
    S = np.zeros((3, 3) + n3)
    for m in range(3):
        S[m, m] = (shift(u[m], 1, m) - u[m]) / dx
    for m in range(3):
        for j in range(m + 1, 3):
            # edge (m, j): lower corner of the cell in both m and j
            e = 0.5 * ((u[m] - shift(u[m], -1, j)) / dx + (u[j] - shift(u[j], -1, m)) / dx)
            c = 0.25 * (e + shift(e, 1, m) + shift(e, 1, j) + shift(shift(e, 1, m), 1, j))
            S[m, j] = c
            S[j, m] = c
    return S


def strain_magnitude(S: np.ndarray) -> np.ndarray:
    """|S| = (2 S_ij S_ij)^(1/2)."""
    return np.sqrt(2.0 * np.einsum("ij...,ij...->...", S, S))


def eddy_viscosity_forcing(u: np.ndarray, dx: float, coeff: float) -> np.ndarray:
    """Divergence of ``2 coeff dx^2 |S| S``."""
    S = strain_rate(u, dx)
    nu_t = coeff * dx**2 * strain_magnitude(S)
    return tensor_face_divergence(2.0 * nu_t * S, dx)


# ---------------------------------------------------------------------------
# closures


class NoModel:
    name = "no_model"

    def forcing(self, u: np.ndarray, grid: GridSpec) -> np.ndarray:
        return np.zeros_like(u)


def no_model_forcing(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    return NoModel().forcing(u, grid)


@dataclass
class Smagorinsky:
    """Constant-coefficient Smagorinsky, filter width equal to the grid spacing."""

    C_S: float = 0.18
    name: str = "smagorinsky"

    def __post_init__(self):
        if not self.C_S > 0:
            raise ValueError("C_S must be positive")

    def forcing(self, u: np.ndarray, grid: GridSpec) -> np.ndarray:
        return eddy_viscosity_forcing(u, grid.dx, self.C_S**2)


def smagorinsky_forcing(u: np.ndarray, grid: GridSpec, C_S: float = 0.18) -> np.ndarray:
    return Smagorinsky(C_S).forcing(u, grid)


def apply_test_filter(f: np.ndarray) -> np.ndarray:
    """Width-two discrete box (trapezoid weights 1/4, 1/2, 1/4 per axis)."""
    for axis in range(f.ndim - 3, f.ndim):
        f = 0.25 * np.roll(f, 1, axis) + 0.5 * f + 0.25 * np.roll(f, -1, axis)
    return f


def dynamic_coefficient(u: np.ndarray, dx: float) -> float:
    """Domain-averaged Germano-Lilly coefficient ``C_d`` (multiplies dx^2), clipped at 0."""
    c = face_to_center(u)
    S = strain_rate(u, dx)
    Smag = strain_magnitude(S)
    c_hat = apply_test_filter(c)
    S_hat = apply_test_filter(S)
    Smag_hat = strain_magnitude(S_hat)
    alpha2 = 4.0
    num = 0.0
    den = 0.0
    for i in range(3):
        for j in range(3):
            L = apply_test_filter(c[i] * c[j]) - c_hat[i] * c_hat[j]
            M = 2.0 * dx**2 * (apply_test_filter(Smag * S[i, j]) - alpha2 * Smag_hat * S_hat[i, j])
            num += float(np.sum(L * M))
            den += float(np.sum(M * M))
    if den == 0.0:
        return 0.0
    return max(num / den, 0.0)


@dataclass
class DynamicSmagorinsky:
    name: str = "dynamic_smagorinsky"

    def forcing(self, u: np.ndarray, grid: GridSpec) -> np.ndarray:
        C_d = dynamic_coefficient(u, grid.dx)
        if C_d == 0.0:
            return np.zeros_like(u)
        return eddy_viscosity_forcing(u, grid.dx, C_d)


def dynamic_smagorinsky_forcing(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    return DynamicSmagorinsky().forcing(u, grid)


@dataclass
class LinearClosure:
    """Linear-in-parameters closure ``h = sum_p theta_p B_p(u)``.

    Bases: ``identity`` (u itself) and ``laplacian``. Used for manufactured
    training problems where the optimum is known in closed form.
    """

    params: np.ndarray
    bases: tuple = ("identity",)
    name: str = "linear"

    def __post_init__(self):
        self.params = np.atleast_1d(np.asarray(self.params, dtype=float))
        if self.params.size != len(self.bases):
            raise ValueError("one parameter per basis")

    @property
    def theta(self) -> np.ndarray:
        return self.params

    def with_params(self, theta: np.ndarray) -> "LinearClosure":
        return LinearClosure(np.array(theta, dtype=float), self.bases, self.name)

    def _basis(self, u: np.ndarray, dx: float) -> list[np.ndarray]:
        from .solver import vector_laplacian

        out = []
        for b in self.bases:
            if b == "identity":
                out.append(u)
            elif b == "laplacian":
                out.append(vector_laplacian(u, dx))
            else:
                raise ValueError(f"unknown basis {b!r}")
        return out

    def forcing(self, u: np.ndarray, grid: GridSpec) -> np.ndarray:
        return sum(t * B for t, B in zip(self.params, self._basis(u, grid.dx)))

    def forcing_jvp(self, u, du, dtheta, grid):
        out = self.forcing(du, grid)
        if dtheta is not None:
            out = out + sum(t * B for t, B in zip(dtheta, self._basis(u, grid.dx)))
        return out

    def forcing_vjp(self, u, v, grid):
        # both bases are self-adjoint
        gu = sum(t * B for t, B in zip(self.params, self._basis(v, grid.dx)))
        gtheta = np.array([np.sum(v * B) for B in self._basis(u, grid.dx)])
        return gu, gtheta
