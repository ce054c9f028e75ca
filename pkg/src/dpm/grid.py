"""Periodic staggered (MAC) grid geometry and spectral utilities.

Storage convention, used everywhere in the package:

* scalar fields are ``(n, n, n)`` arrays at cell centers ``(i+1/2, j+1/2, k+1/2) dx``;
* vector fields are ``(3, n, n, n)`` arrays, component ``m`` stored on the faces
  normal to axis ``m``: ``u[0][i, j, k]`` sits at ``(i, j+1/2, k+1/2) dx``, i.e. on
  the *lower* face of cell ``(i, j, k)``. Components 1 and 2 follow cyclically.

All index arithmetic wraps modulo ``n`` on every axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic cube with ``n`` cells per axis."""

    n: int
    domain_length: float = 2.0 * np.pi

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4:
            raise ValueError(f"grid needs n >= 4 cells per axis, got {self.n}")
        if not self.domain_length > 0:
            raise ValueError("domain_length must be positive")

    @property
    def dx(self) -> float:
        return self.domain_length / self.n

    @property
    def kappa0(self) -> float:
        """Fundamental wavenumber 2*pi/L."""
        return 2.0 * np.pi / self.domain_length

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    def center_coords(self) -> np.ndarray:
        """Coordinates of cell centers, shape ``(3, n, n, n)``."""
        x = (np.arange(self.n) + 0.5) * self.dx
        return np.stack(np.meshgrid(x, x, x, indexing="ij"))

    def face_coords(self, m: int) -> np.ndarray:
        """Coordinates of the faces carrying velocity component ``m``."""
        c = self.center_coords()
        c[m] -= 0.5 * self.dx
        return c

    def zeros_vector(self) -> np.ndarray:
        return np.zeros((3,) + self.shape)

    def zeros_scalar(self) -> np.ndarray:
        return np.zeros(self.shape)


@dataclass(frozen=True)
class Spectrum:
    shell_centers: np.ndarray
    energy: np.ndarray
    bin_width: float

    def total(self) -> float:
        return float(np.sum(self.energy) * self.bin_width)


def wrap_index(i: int, n: int) -> int:
    if n < 1:
        raise ValueError("n must be >= 1")
    return i % n


def shift(f: np.ndarray, offset: int, axis: int) -> np.ndarray:
    """Return ``g`` with ``g[i] = f[i + offset]`` along ``axis`` (periodic)."""
    return np.roll(f, -offset, axis=axis)


def fft3_real(field: np.ndarray) -> np.ndarray:
    """Unnormalized forward 3D FFT of a real field (full complex array)."""
    return np.fft.fftn(field)


def ifft3_real(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft3_real`; the 1/n^3 normalization lives here."""
    return np.fft.ifftn(coeffs).real


def wavenumber_magnitude(grid: GridSpec) -> np.ndarray:
    k = np.fft.fftfreq(grid.n, d=1.0 / grid.n) * grid.kappa0
    kx, ky, kz = np.meshgrid(k, k, k, indexing="ij")
    return np.sqrt(kx**2 + ky**2 + kz**2)


def shell_index(kmag: np.ndarray, kappa0: float) -> np.ndarray:
    """Shell of each mode: bin ``b`` holds ``b*k0 < |k| <= (b+1)*k0``; ``|k| = 0`` goes to bin 0."""
    # round away float noise so modes exactly on a boundary land in the lower bin
    ratio = np.round(kmag / kappa0, 9)
    return np.maximum(np.ceil(ratio).astype(int) - 1, 0)


def shell_spectrum(u: np.ndarray, grid: GridSpec) -> Spectrum:
    """Shell-summed kinetic energy spectrum of a vector field.

    Normalized so that ``sum(E) * k0 == 0.5 * mean(u . u)`` over face values.
    """
    n = grid.n
    power = np.zeros(grid.shape)
    for m in range(3):
        power += np.abs(np.fft.fftn(u[m])) ** 2
    power *= 0.5 / float(n) ** 6
    bins = shell_index(wavenumber_magnitude(grid), grid.kappa0)
    nbins = int(bins.max()) + 1
    energy = np.bincount(bins.ravel(), weights=power.ravel(), minlength=nbins)
    energy /= grid.kappa0
    centers = (np.arange(nbins) + 0.5) * grid.kappa0
    return Spectrum(shell_centers=centers, energy=energy, bin_width=grid.kappa0)


def kinetic_energy_faces(u: np.ndarray) -> float:
    """0.5 * <u . u> using face values directly."""
    return 0.5 * float(np.mean(np.sum(u * u, axis=0)))


def face_to_center(u: np.ndarray) -> np.ndarray:
    """Average each component onto cell centers: ``c_m[i] = (u_m[i] + u_m[i+1]) / 2``."""
    return np.stack([0.5 * (u[m] + shift(u[m], 1, m)) for m in range(3)])


def face_to_center_T(c: np.ndarray) -> np.ndarray:
    """Transpose of :func:`face_to_center`."""
    return np.stack([0.5 * (c[m] + shift(c[m], -1, m)) for m in range(3)])


def center_to_face(c: np.ndarray) -> np.ndarray:
    """Average cell-center vectors onto faces: ``u_m[i] = (c_m[i-1] + c_m[i]) / 2``."""
    return np.stack([0.5 * (c[m] + shift(c[m], -1, m)) for m in range(3)])


def center_to_face_T(u: np.ndarray) -> np.ndarray:
    return np.stack([0.5 * (u[m] + shift(u[m], 1, m)) for m in range(3)])
