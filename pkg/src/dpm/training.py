"""Stochastic adjoint training, RMSprop, a priori training and checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import adjoint_sweep_seeds, forward_window, loss_seeds, window_loss
from .closures import tensor_face_divergence
from .filtering import FilterSpec, box_filter_centers, downsample_centers
from .grid import GridSpec, face_to_center
from .io import pack_record, unpack_record
from .network import model_arrays, model_from_parts, model_header
from .solver import FluidState, SolverBlowUp, SolverConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DPMCKPT1"


@dataclass
class TrainConfig:
    window_steps: int = 5
    les_to_dns_step_ratio: int = 10
    learning_rate: float = 1e-3
    lr_decay_iterations: float = 1000.0
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    divergence_free: bool = True
    compare: str = "end"
    blowup_factor: float = 1000.0

    def __post_init__(self):
        if self.window_steps < 1:
            raise ValueError("window_steps must be >= 1")
        if self.learning_rate < 0 or not self.lr_decay_iterations > 0:
            raise ValueError("learning rate must be >= 0 with a positive decay scale")
        if not 0 <= self.rmsprop_rho < 1 or not self.rmsprop_eps > 0:
            raise ValueError("rmsprop_rho must lie in [0, 1) and rmsprop_eps > 0")
        if self.compare not in ("end", "every"):
            raise ValueError("compare must be 'end' or 'every'")

    def alpha(self, k: int) -> float:
        """Decaying learning rate ``alpha_0 / (1 + k / k_decay)``."""
        return self.learning_rate / (1.0 + k / self.lr_decay_iterations)


@dataclass
class TrainState:
    theta: np.ndarray
    v: np.ndarray
    k: int = 0
    rng_state: dict | None = None
    loss_history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @classmethod
    def start(cls, theta: np.ndarray, seed: int) -> "TrainState":
        theta = np.array(theta, dtype=float)
        rng = np.random.default_rng(seed)
        return cls(theta, np.zeros_like(theta), 0, rng.bit_generator.state)

    def rng(self) -> np.random.Generator:
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng

    def copy(self) -> "TrainState":
        return TrainState(self.theta.copy(), self.v.copy(), self.k, _copy_state(self.rng_state),
                          list(self.loss_history), list(self.events))


def _copy_state(state):
    if isinstance(state, dict):
        return {k: _copy_state(v) for k, v in state.items()}
    return state


def rmsprop_update(train: TrainState, grad: np.ndarray, cfg: TrainConfig) -> TrainState:
    """``v <- rho v + (1-rho) g^2``; ``theta <- theta - alpha_k g / (sqrt(v) + eps)``."""
    if grad.shape != train.theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {train.theta.shape}")
    rho = cfg.rmsprop_rho
    v = rho * train.v + (1.0 - rho) * grad * grad
    theta = train.theta - cfg.alpha(train.k) * grad / (np.sqrt(v) + cfg.rmsprop_eps)
    return TrainState(theta, v, train.k + 1, train.rng_state, train.loss_history, train.events)


# ---------------------------------------------------------------------------
# data


@dataclass
class CaseData:
    """Coarse fields of one case at consecutive LES steps (the SAM sampling pool)."""

    case_id: str
    grid: GridSpec
    viscosity: float
    density: float
    dt: float
    fields: list[np.ndarray]
    times: list[float]
    urms0: float = 1.0
    t_l0: float = 1.0

    def __post_init__(self):
        if len(self.fields) != len(self.times):
            raise ValueError("one time per field")

    def initial_state(self, n: int) -> FluidState:
        return FluidState(self.grid, self.fields[n].copy(), np.zeros(self.grid.shape),
                          self.times[n], self.viscosity, self.density)

    def window_targets(self, n: int, W: int, compare: str) -> dict[int, np.ndarray]:
        if n + W >= len(self.fields):
            raise ValueError(f"window {n}..{n + W} exceeds the {len(self.fields)} stored fields")
        ks = range(1, W + 1) if compare == "every" else (W,)
        return {k: self.fields[n + k] for k in ks}


def solver_config(case: CaseData, closure, cfg: TrainConfig) -> SolverConfig:
    return SolverConfig(case.dt, projection_enabled=cfg.divergence_free, closure=closure,
                        blowup_bound=cfg.blowup_factor * case.urms0)


def sample_window(rng: np.random.Generator, dataset: list[CaseData], W: int) -> tuple[int, int]:
    m = int(rng.integers(len(dataset)))
    nmax = len(dataset[m].fields) - W
    if nmax < 1:
        raise ValueError(f"case {dataset[m].case_id} is shorter than one window")
    return m, int(rng.integers(nmax))


# ---------------------------------------------------------------------------
# stochastic adjoint method


def sam_iteration(train: TrainState, closure, dataset: list[CaseData], cfg: TrainConfig) -> TrainState:
    """One SAM step: sample (m, n), run the window, adjoint sweep, RMSprop update.

    A window that blows up (or yields a non-finite gradient) is skipped: the
    iteration counter advances, the loss is recorded as NaN and an event is logged.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = train.rng()
    m, n = sample_window(rng, dataset, cfg.window_steps)
    case = dataset[m]
    nxt = TrainState(train.theta, train.v, train.k, rng.bit_generator.state,
                     list(train.loss_history), list(train.events))
    scfg = solver_config(case, closure.with_params(train.theta), cfg)
    targets = case.window_targets(n, cfg.window_steps, cfg.compare)
    try:
        traj = forward_window(case.initial_state(n), scfg, cfg.window_steps)
        loss = window_loss(traj, targets)
        grad = adjoint_sweep_seeds(traj, loss_seeds(traj, targets)).grad_theta
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient")
    except (SolverBlowUp, FloatingPointError) as exc:
        event = {"iteration": train.k, "case": case.case_id, "window": n, "error": str(exc)}
        log.warning("skipping SAM sample: %s", event)
        nxt.events.append(event)
        nxt.loss_history.append(float("nan"))
        nxt.k += 1
        return nxt
    out = rmsprop_update(nxt, grad, cfg)
    out.loss_history.append(loss)
    return out


def train_sam(closure, dataset: list[CaseData], cfg: TrainConfig, iterations: int,
              train: TrainState | None = None, seed: int = 0, checkpoint=None, checkpoint_every: int = 0,
              progress_every: int = 0) -> TrainState:
    """Run SAM until ``train.k == iterations``; ``checkpoint(train)`` is called periodically."""
    train = train or TrainState.start(closure.theta, seed)
    while train.k < iterations:
        train = sam_iteration(train, closure, dataset, cfg)
        if checkpoint and checkpoint_every and train.k % checkpoint_every == 0:
            checkpoint(train)
        if progress_every and train.k % progress_every == 0:
            recent = np.asarray(train.loss_history[-progress_every:])
            log.info("SAM iteration %d: mean loss %.6g", train.k, float(np.nanmean(recent)))
    return train


# ---------------------------------------------------------------------------
# a priori training


def sgs_stress(u_fine: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Residual stress ``filter(u_i u_j) - filter(u_i) filter(u_j)`` at coarse cell centers."""
    c = face_to_center(u_fine)
    cbar = np.stack([box_filter_centers(c[i], spec) for i in range(3)])
    n_c = u_fine.shape[1] // spec.ratio
    tau = np.zeros((3, 3, n_c, n_c, n_c))
    for i in range(3):
        for j in range(i, 3):
            t = box_filter_centers(c[i] * c[j], spec) - cbar[i] * cbar[j]
            tau[i, j] = tau[j, i] = downsample_centers(t, spec)
    return tau


def sgs_forcing(u_fine: np.ndarray, grid: GridSpec, spec: FilterSpec) -> np.ndarray:
    """A priori target: the face forcing ``-div(tau)`` on the coarse grid."""
    coarse = spec.coarse_grid(grid)
    return -tensor_face_divergence(sgs_stress(u_fine, spec), coarse.dx)


def apriori_loss(closure, u: np.ndarray, target: np.ndarray, grid: GridSpec) -> float:
    d = closure.forcing(u, grid) - target
    return float(np.sum(d * d))


def apriori_train(closure, samples: list[tuple[np.ndarray, np.ndarray]], grid: GridSpec, cfg: TrainConfig,
                  iterations: int, seed: int = 0, train: TrainState | None = None) -> TrainState:
    """Regression of the closure forcing onto fixed targets, one random field pair per step.

    ``samples`` holds ``(u_bar, target_forcing)`` pairs on ``grid``. No PDE is solved.
    """
    if not samples:
        raise ValueError("no a priori samples")
    train = train or TrainState.start(closure.theta, seed)
    while train.k < iterations:
        rng = train.rng()
        u, target = samples[int(rng.integers(len(samples)))]
        c = closure.with_params(train.theta)
        d = c.forcing(u, grid) - target
        _, grad = c.forcing_vjp(u, 2.0 * d, grid)
        nxt = TrainState(train.theta, train.v, train.k, rng.bit_generator.state,
                         train.loss_history, train.events)
        train = rmsprop_update(nxt, grad, cfg)
        train.loss_history.append(float(np.sum(d * d)))
    return train


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_to_bytes(model, train: TrainState, extra: dict | None = None) -> bytes:
    header = {
        "format": "dpm-checkpoint",
        "model": model_header(model),
        "k": train.k,
        "rng_state": train.rng_state,
        "events": train.events,
        "extra": extra or {},
    }
    arrays = {f"model.{k}": v for k, v in model_arrays(model.with_params(train.theta)).items()}
    arrays.update(v=train.v, loss_history=np.asarray(train.loss_history, dtype=float))
    return pack_record(CHECKPOINT_MAGIC, header, arrays)


def checkpoint_from_bytes(blob: bytes):
    header, arrays = unpack_record(blob, CHECKPOINT_MAGIC)
    model = model_from_parts(header["model"], {k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
    train = TrainState(model.theta.copy(), arrays["v"], header["k"], header["rng_state"],
                       arrays["loss_history"].tolist(), list(header["events"]))
    return model, train


def save_checkpoint(path, model, train: TrainState, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_to_bytes(model, train, extra))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
