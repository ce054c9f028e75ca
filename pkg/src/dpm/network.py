"""Gated tanh network closure with hand-written forward and reverse mode.

Network (``sigma = tanh``)::

    H1 = sigma(W1 z + b1)          G1 = sigma(W5 z + b5)
    H2 = sigma(W2 H1 + b2)         H3 = G1 * H2
    H4 = sigma(W3 H3 + b3)         G2 = sigma(W6 z + b6)
    H5 = G2 * H4                   y  = W4 H5 + b4

Feature layout. At every LES cell the base channels of each velocity component
``c`` (center-interpolated) are, in order: value, d/dx, d/dy, d/dz, then second
derivatives (``paper_text``: xx, yy, zz; ``full_hessian``: xx, xy, xz, yx, yy,
yz, zx, zy, zz). The feature vector concatenates the base channels of the
stencil points [center, -x, +x, -y, +y, -z, +z], each block ordered by
component, so ``z[p * 3 * B + c * B + q]`` with ``B`` channels per component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .closures import tensor_face_divergence, tensor_face_divergence_T
from .grid import GridSpec, center_to_face, center_to_face_T, face_to_center, face_to_center_T, shift
from .io import pack_record, unpack_record

STENCIL = ((0, 0), (0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1))  # (axis, offset)

_OUTPUT_K = {"direct_forcing": 3, "tensor_divergence": 6, "paper_k18": 18}
_SYM_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def param_count(D: int, N_H: int, K: int) -> int:
    if min(D, N_H, K) < 1:
        raise ValueError("dimensions must be positive")
    return 3 * (N_H * D + N_H) + 2 * (N_H * N_H + N_H) + K * N_H + K


# ---------------------------------------------------------------------------
# parameters


def _layout(D: int, N_H: int, K: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("W1", (N_H, D)), ("b1", (N_H,)),
        ("W2", (N_H, N_H)), ("b2", (N_H,)),
        ("W3", (N_H, N_H)), ("b3", (N_H,)),
        ("W4", (K, N_H)), ("b4", (K,)),
        ("W5", (N_H, D)), ("b5", (N_H,)),
        ("W6", (N_H, D)), ("b6", (N_H,)),
    ]


@dataclass
class NetParams:
    """All weights and biases stored in one flat vector (layout order W1, b1, ..., W6, b6)."""

    D: int
    N_H: int
    K: int
    theta: np.ndarray = None

    def __post_init__(self):
        n = param_count(self.D, self.N_H, self.K)
        if self.theta is None:
            self.theta = np.zeros(n)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.theta.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.D, self.N_H, self.K)

    def views(self, vec: np.ndarray | None = None) -> dict[str, np.ndarray]:
        vec = self.theta if vec is None else vec
        out, pos = {}, 0
        for name, shape in _layout(*self.dims):
            size = int(np.prod(shape))
            out[name] = vec[pos:pos + size].reshape(shape)
            pos += size
        return out

    def __getattr__(self, name):
        if name[:1] in ("W", "b") and name[1:].isdigit():
            return self.views()[name]
        raise AttributeError(name)

    def with_theta(self, theta: np.ndarray) -> "NetParams":
        return NetParams(self.D, self.N_H, self.K, np.array(theta, dtype=float))


def xavier_init(D: int, N_H: int, K: int, seed: int) -> NetParams:
    """Uniform Xavier weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = NetParams(D, N_H, K)
    for name, shape in _layout(D, N_H, K):
        if name.startswith("W"):
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params.views()[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


# ---------------------------------------------------------------------------
# network evaluation


def net_forward(params: NetParams, z: np.ndarray, *, cache: bool = False):
    """Evaluate the network on a batch ``z`` of shape (N, D) (or a single vector)."""
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != params.D:
        raise ValueError(f"feature dimension {z.shape[1]} != D={params.D}")
    p = params.views()
    H1 = np.tanh(z @ p["W1"].T + p["b1"])
    H2 = np.tanh(H1 @ p["W2"].T + p["b2"])
    G1 = np.tanh(z @ p["W5"].T + p["b5"])
    H3 = G1 * H2
    H4 = np.tanh(H3 @ p["W3"].T + p["b3"])
    G2 = np.tanh(z @ p["W6"].T + p["b6"])
    H5 = G2 * H4
    y = H5 @ p["W4"].T + p["b4"]
    if single:
        y = y[0]
    if cache:
        return y, dict(z=z, H1=H1, H2=H2, G1=G1, H3=H3, H4=H4, G2=G2, H5=H5)
    return y


def net_backward(params: NetParams, z: np.ndarray, upstream: np.ndarray, cache: dict | None = None):
    """Reverse mode: gradients of ``sum(upstream * y)`` w.r.t. the flat parameters and ``z``."""
    single = z.ndim == 1
    if cache is None:
        _, cache = net_forward(params, z, cache=True)
    Y = np.atleast_2d(upstream)
    if Y.shape[1] != params.K:
        raise ValueError("upstream has the wrong output dimension")
    p = params.views()
    c = cache
    grad = np.zeros_like(params.theta)
    g = params.views(grad)

    g["W4"][...] = Y.T @ c["H5"]
    g["b4"][...] = Y.sum(axis=0)
    dH5 = Y @ p["W4"]
    dG2 = dH5 * c["H4"]
    da4 = dH5 * c["G2"] * (1.0 - c["H4"] ** 2)
    g["W3"][...] = da4.T @ c["H3"]
    g["b3"][...] = da4.sum(axis=0)
    dH3 = da4 @ p["W3"]
    dG1 = dH3 * c["H2"]
    da2 = dH3 * c["G1"] * (1.0 - c["H2"] ** 2)
    g["W2"][...] = da2.T @ c["H1"]
    g["b2"][...] = da2.sum(axis=0)
    da1 = (da2 @ p["W2"]) * (1.0 - c["H1"] ** 2)
    da5 = dG1 * (1.0 - c["G1"] ** 2)
    da6 = dG2 * (1.0 - c["G2"] ** 2)
    zz = c["z"]
    g["W1"][...] = da1.T @ zz
    g["b1"][...] = da1.sum(axis=0)
    g["W5"][...] = da5.T @ zz
    g["b5"][...] = da5.sum(axis=0)
    g["W6"][...] = da6.T @ zz
    g["b6"][...] = da6.sum(axis=0)
    grad_z = da1 @ p["W1"] + da5 @ p["W5"] + da6 @ p["W6"]
    return grad, (grad_z[0] if single else grad_z)


def net_jvp(params: NetParams, z: np.ndarray, dz: np.ndarray | None, dtheta: np.ndarray | None,
            cache: dict | None = None) -> np.ndarray:
    """Forward mode: directional derivative of ``y`` along ``(dz, dtheta)``."""
    if cache is None:
        _, cache = net_forward(params, z, cache=True)
    c = cache
    p = params.views()
    N = c["z"].shape[0]
    dzz = np.zeros_like(c["z"]) if dz is None else np.atleast_2d(dz)
    q = params.views(np.zeros_like(params.theta) if dtheta is None else dtheta)

    def lin(x, dx_, W, dW, db):
        return dx_ @ W.T + x @ dW.T + db

    da1 = lin(c["z"], dzz, p["W1"], q["W1"], q["b1"])
    dH1 = (1.0 - c["H1"] ** 2) * da1
    da2 = lin(c["H1"], dH1, p["W2"], q["W2"], q["b2"])
    dH2 = (1.0 - c["H2"] ** 2) * da2
    dG1 = (1.0 - c["G1"] ** 2) * lin(c["z"], dzz, p["W5"], q["W5"], q["b5"])
    dH3 = dG1 * c["H2"] + c["G1"] * dH2
    dH4 = (1.0 - c["H4"] ** 2) * lin(c["H3"], dH3, p["W3"], q["W3"], q["b3"])
    dG2 = (1.0 - c["G2"] ** 2) * lin(c["z"], dzz, p["W6"], q["W6"], q["b6"])
    dH5 = dG2 * c["H4"] + c["G2"] * dH4
    dy = lin(c["H5"], dH5, p["W4"], q["W4"], q["b4"])
    return dy if N > 1 or np.ndim(z) > 1 else dy[0]


# ---------------------------------------------------------------------------
# features


def _cdiff(f, axis, dx):
    return (shift(f, 1, axis) - shift(f, -1, axis)) / (2.0 * dx)


def _d2(f, axis, dx):
    return (shift(f, 1, axis) - 2.0 * f + shift(f, -1, axis)) / dx**2


@dataclass
class FeatureConfig:
    derivative_set: str = "full_hessian"
    scales: np.ndarray | None = None

    def __post_init__(self):
        if self.derivative_set not in ("paper_text", "full_hessian"):
            raise ValueError(f"unknown derivative set {self.derivative_set!r}")
        if self.scales is not None:
            self.scales = np.asarray(self.scales, dtype=float)
            if self.scales.shape != (self.D,):
                raise ValueError(f"need {self.D} normalization constants")
            if not np.all(self.scales > 0):
                raise ValueError("normalization constants must be strictly positive")

    @property
    def second_pairs(self) -> list[tuple[int, int]]:
        if self.derivative_set == "paper_text":
            return [(0, 0), (1, 1), (2, 2)]
        return [(a, b) for a in range(3) for b in range(3)]

    @property
    def per_component(self) -> int:
        return 4 + len(self.second_pairs)

    @property
    def D(self) -> int:
        return len(STENCIL) * 3 * self.per_component

    def scale_vector(self) -> np.ndarray:
        return np.ones(self.D) if self.scales is None else self.scales


def _channel_ops(cfg: FeatureConfig, dx: float):
    """Linear maps center field -> channel, each paired with its transpose."""
    ops = [(lambda f: f, lambda g: g)]
    for a in range(3):
        ops.append((lambda f, a=a: _cdiff(f, a, dx), lambda g, a=a: -_cdiff(g, a, dx)))
    for a, b in cfg.second_pairs:
        if a == b:
            ops.append((lambda f, a=a: _d2(f, a, dx), lambda g, a=a: _d2(g, a, dx)))
        else:
            fwd = lambda f, a=a, b=b: _cdiff(_cdiff(f, a, dx), b, dx)
            ops.append((fwd, fwd))  # product of two antisymmetric commuting maps
    return ops


def base_channels(u: np.ndarray, dx: float, cfg: FeatureConfig) -> np.ndarray:
    c = face_to_center(u)
    ops = _channel_ops(cfg, dx)
    return np.stack([op(c[m]) for m in range(3) for op, _ in ops])


def base_channels_T(g: np.ndarray, dx: float, cfg: FeatureConfig) -> np.ndarray:
    ops = _channel_ops(cfg, dx)
    B = len(ops)
    c = np.stack([sum(opT(g[m * B + q]) for q, (_, opT) in enumerate(ops)) for m in range(3)])
    return face_to_center_T(c)


def feature_field(u: np.ndarray, dx: float, cfg: FeatureConfig) -> np.ndarray:
    """Feature matrix for every cell, shape (n**3, D), rows in C order of (i, j, k)."""
    base = base_channels(u, dx, cfg)
    blocks = [base if off == 0 else shift(base, off, axis + 1) for axis, off in STENCIL]
    Z = np.concatenate(blocks, axis=0)
    Z = Z.reshape(Z.shape[0], -1).T
    return Z / cfg.scale_vector()


def feature_field_T(G: np.ndarray, shape: tuple[int, int, int], dx: float, cfg: FeatureConfig) -> np.ndarray:
    """Transpose of :func:`feature_field` applied to a (n**3, D) array."""
    G = (G / cfg.scale_vector()).T.reshape((cfg.D,) + tuple(shape))
    nb = 3 * cfg.per_component
    base = np.zeros((nb,) + tuple(shape))
    for p, (axis, off) in enumerate(STENCIL):
        block = G[p * nb:(p + 1) * nb]
        base += block if off == 0 else shift(block, -off, axis + 1)
    return base_channels_T(base, dx, cfg)


def extract_features(u: np.ndarray, cell: tuple[int, int, int], dx: float, cfg: FeatureConfig) -> np.ndarray:
    n = u.shape[1]
    i, j, k = (c % n for c in cell)
    return feature_field(u, dx, cfg)[(i * n + j) * n + k]


# ---------------------------------------------------------------------------
# output assembly


def _tensor_from_outputs(y: np.ndarray, mode: str, shape) -> np.ndarray:
    n3 = tuple(shape)
    if mode == "tensor_divergence":
        tau = np.zeros((3, 3) + n3)
        for q, (a, b) in enumerate(_SYM_PAIRS):
            t = y[:, q].reshape(n3)
            tau[a, b] = t
            tau[b, a] = t
        return tau
    # paper_k18: two 3x3 tensors, symmetrized sum
    T = (y[:, :9] + y[:, 9:]).T.reshape((3, 3) + n3)
    return 0.5 * (T + T.transpose(1, 0, 2, 3, 4))


def _tensor_from_outputs_T(tau_bar: np.ndarray, mode: str) -> np.ndarray:
    n3 = tau_bar.shape[2:]
    N = int(np.prod(n3))
    if mode == "tensor_divergence":
        out = np.zeros((N, 6))
        for q, (a, b) in enumerate(_SYM_PAIRS):
            g = tau_bar[a, b] if a == b else tau_bar[a, b] + tau_bar[b, a]
            out[:, q] = g.ravel()
        return out
    sym = 0.5 * (tau_bar + tau_bar.transpose(1, 0, 2, 3, 4))
    flat = sym.reshape(9, N).T
    return np.concatenate([flat, flat], axis=1)


def outputs_to_forcing(y: np.ndarray, mode: str, shape, dx: float) -> np.ndarray:
    if mode == "direct_forcing":
        return center_to_face(y.T.reshape((3,) + tuple(shape)))
    return tensor_face_divergence(_tensor_from_outputs(y, mode, shape), dx)


def outputs_to_forcing_T(v: np.ndarray, mode: str, dx: float) -> np.ndarray:
    if mode == "direct_forcing":
        return center_to_face_T(v).reshape(3, -1).T
    return _tensor_from_outputs_T(tensor_face_divergence_T(v, dx), mode)


@dataclass
class NeuralClosure:
    """The network embedded as an LES forcing term.

    ``forcing(u) = output_scale * A(F_theta(Z(u)))`` with ``Z`` the (linear)
    feature map and ``A`` the (linear) output assembly for ``output_mode``.
    """

    params: NetParams
    features: FeatureConfig = field(default_factory=FeatureConfig)
    output_mode: str = "paper_k18"
    output_scale: float = 1.0
    seed: int = 0
    name: str = "dpm"

    def __post_init__(self):
        if self.output_mode not in _OUTPUT_K:
            raise ValueError(f"unknown output mode {self.output_mode!r}")
        if _OUTPUT_K[self.output_mode] != self.params.K:
            raise ValueError(f"output mode {self.output_mode} needs K={_OUTPUT_K[self.output_mode]}")
        if self.features.D != self.params.D:
            raise ValueError(f"feature dimension {self.features.D} != network D={self.params.D}")

    @classmethod
    def create(cls, N_H: int, seed: int = 0, derivative_set: str = "full_hessian",
               output_mode: str = "paper_k18", scales=None, output_scale: float = 1.0) -> "NeuralClosure":
        feats = FeatureConfig(derivative_set, scales)
        params = xavier_init(feats.D, N_H, _OUTPUT_K[output_mode], seed)
        return cls(params, feats, output_mode, output_scale, seed)

    @property
    def theta(self) -> np.ndarray:
        return self.params.theta

    def with_params(self, theta: np.ndarray) -> "NeuralClosure":
        return NeuralClosure(self.params.with_theta(theta), self.features, self.output_mode,
                             self.output_scale, self.seed, self.name)

    def forcing(self, u: np.ndarray, grid: GridSpec) -> np.ndarray:
        Z = feature_field(u, grid.dx, self.features)
        y = net_forward(self.params, Z)
        return self.output_scale * outputs_to_forcing(y, self.output_mode, grid.shape, grid.dx)

    def forcing_jvp(self, u, du, dtheta, grid):
        Z = feature_field(u, grid.dx, self.features)
        dZ = None if du is None else feature_field(du, grid.dx, self.features)
        dy = net_jvp(self.params, Z, dZ, dtheta)
        return self.output_scale * outputs_to_forcing(dy, self.output_mode, grid.shape, grid.dx)

    def forcing_vjp(self, u, v, grid):
        """Return (d<v, forcing>/du, d<v, forcing>/dtheta)."""
        Z = feature_field(u, grid.dx, self.features)
        Y = self.output_scale * outputs_to_forcing_T(v, self.output_mode, grid.dx)
        gtheta, gZ = net_backward(self.params, Z, Y)
        gu = feature_field_T(gZ, grid.shape, grid.dx, self.features)
        return gu, gtheta


def feature_rms(fields: list[np.ndarray], dx: float, cfg: FeatureConfig, floor: float = 1e-12) -> np.ndarray:
    """Per-feature RMS over a set of velocity fields (used as normalization constants)."""
    raw = FeatureConfig(cfg.derivative_set)
    acc = np.zeros(raw.D)
    count = 0
    for u in fields:
        Z = feature_field(u, dx, raw)
        acc += np.sum(Z * Z, axis=0)
        count += Z.shape[0]
    rms = np.sqrt(acc / max(count, 1))
    return np.maximum(rms, floor)


# ---------------------------------------------------------------------------
# model file

MODEL_MAGIC = b"DPMMODL1"


def model_header(model: NeuralClosure) -> dict:
    return {
        "format": "dpm-model",
        "dims": list(model.params.dims),
        "derivative_set": model.features.derivative_set,
        "output_mode": model.output_mode,
        "output_scale": model.output_scale,
        "seed": model.seed,
        "name": model.name,
    }


def model_arrays(model: NeuralClosure) -> dict[str, np.ndarray]:
    arrays = dict(model.params.views())
    if model.features.scales is not None:
        arrays["scales"] = model.features.scales
    return arrays


def model_from_parts(header: dict, arrays: dict[str, np.ndarray]) -> NeuralClosure:
    D, N_H, K = header["dims"]
    params = NetParams(D, N_H, K)
    views = params.views()
    for name in views:
        views[name][...] = arrays[name]
    feats = FeatureConfig(header["derivative_set"], arrays.get("scales"))
    return NeuralClosure(params, feats, header["output_mode"], header["output_scale"],
                         header["seed"], header["name"])


def model_to_bytes(model: NeuralClosure, extra: dict | None = None) -> bytes:
    return pack_record(MODEL_MAGIC, dict(model_header(model), extra=extra or {}), model_arrays(model))


def model_from_bytes(blob: bytes) -> NeuralClosure:
    return model_from_parts(*unpack_record(blob, MODEL_MAGIC))


def read_model_header(blob: bytes) -> dict:
    return unpack_record(blob, MODEL_MAGIC)[0]


def save_model(model: NeuralClosure, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model, extra))


def load_model(path) -> NeuralClosure:
    return model_from_bytes(Path(path).read_bytes())
