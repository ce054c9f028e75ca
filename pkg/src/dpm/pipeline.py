"""Experiment stages: DNS generation, filtering, training and evaluation.

Every stage can run in memory or against an output directory laid out as::

    dns/<case>/snap_00000.dpms        fine DNS fields (kind dns)
    targets/<case>/snap_00000.dpms    coarse U_bar, w and a priori targets (kind coarse_target)
    models/<name>.dpmm                trained closures
    checkpoints/<name>.dpmc           optimizer state
    les/<closure>/...                 evaluation curves and final fields
    compare/...                       decay, spectrum and summary reports
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .analysis import (
    CaseSpec,
    DecayResult,
    decay_experiment,
    heldout_window_loss,
    write_decay_csv,
    write_spectrum_csv,
)
from .closures import DynamicSmagorinsky, Smagorinsky
from .config import ConfigError, ExperimentConfig
from .filtering import FilterSpec, box_filter, divfree_project, downsample
from .grid import GridSpec
from .io import Snapshot, read_snapshot, write_snapshot
from .network import NeuralClosure, feature_rms, load_model, save_model
from .solver import FluidState, SolverConfig, cfl_time_step, dissipation_rate, init_isotropic, step, u_rms
from .training import (
    CaseData,
    TrainConfig,
    TrainState,
    apriori_train,
    load_checkpoint,
    save_checkpoint,
    sgs_forcing,
    sgs_stress,
    train_sam,
)

log = logging.getLogger(__name__)

MODEL_NAMES = {("adjoint", True): "dpm", ("adjoint", False): "dpm_nodiv", ("apriori", True): "dpm_apriori",
               ("apriori", False): "dpm_apriori"}


class DataError(RuntimeError):
    """Missing or inconsistent stage inputs."""


def case_specs(cfg: ExperimentConfig) -> list[CaseSpec]:
    specs = []
    roles = [("train", r) for r in cfg.cases.train] + [("test", r) for r in cfg.cases.test]
    for i, (role, r) in enumerate(roles):
        specs.append(CaseSpec(r, cfg.physics.urms0 * r, cfg.cases.seed_base + i, role))
    return specs


def dns_grid(cfg: ExperimentConfig) -> GridSpec:
    return GridSpec(cfg.grid.dns_n, cfg.grid.domain_length)


def filter_spec(cfg: ExperimentConfig) -> FilterSpec:
    return FilterSpec(cfg.filter.ratio)


# ---------------------------------------------------------------------------
# DNS


def run_dns(cfg: ExperimentConfig, spec: CaseSpec, sink: Callable[[int, FluidState, dict], None]) -> dict:
    """Generate one case and pass every stored state to ``sink(index, state, meta)``.

    Viscosity and initial rms velocity both scale with the case's viscosity ratio,
    so all cases share one Reynolds number. The time step comes from the initial
    CFL number and is then frozen. After an initial decay, a state is stored every
    ``les.dns_steps_per_les_step`` steps for ``dns.duration`` eddy-turnover times.
    """
    grid = dns_grid(cfg)
    mu = cfg.physics.mu0 * spec.mu_ratio
    state = init_isotropic(grid, spec.urms0, cfg.physics.peak_wavenumber, spec.seed, mu, cfg.physics.density)
    dt = cfl_time_step(state.u, grid.dx, cfg.dns.cfl)
    k0 = 0.5 * u_rms(state.u) ** 2
    eps0 = dissipation_rate(state)
    t_l0 = k0 / eps0
    stride = cfg.les.dns_steps_per_les_step
    n_decay = int(math.ceil(cfg.dns.initial_decay * t_l0 / dt - 1e-9))
    n_store = int(math.floor(cfg.dns.duration * t_l0 / (stride * dt) + 1e-9)) + 1
    meta = {"case_id": spec.case_id, "mu_ratio": spec.mu_ratio, "seed": spec.seed, "role": spec.role,
            "urms0": spec.urms0, "t_l0": t_l0, "eps0": eps0, "dt_dns": dt, "dt_les": stride * dt,
            "n_decay": n_decay, "n_store": n_store, "stride": stride}
    scfg = SolverConfig(dt, blowup_bound=cfg.les.blowup_factor * spec.urms0)
    for _ in range(n_decay):
        state = step(state, scfg)
    for i in range(n_store):
        if i:
            for _ in range(stride):
                state = step(state, scfg)
        sink(i, state, meta)
    return meta


# ---------------------------------------------------------------------------
# filtering


def coarse_arrays(u_fine: np.ndarray, grid: GridSpec, fspec: FilterSpec) -> tuple[dict, dict]:
    coarse = fspec.coarse_grid(grid)
    U_bar = downsample(box_filter(u_fine, fspec), fspec)
    w, _ = divfree_project(U_bar, coarse.dx)
    tau = sgs_stress(u_fine, fspec)
    forcing = sgs_forcing(u_fine, grid, fspec)
    stats = {"tau_rms": float(np.sqrt(np.mean(tau**2))), "sgs_forcing_rms": float(np.sqrt(np.mean(forcing**2)))}
    return {"U_bar": U_bar, "w": w, "sgs_forcing": forcing}, stats


@dataclass
class CoarseCase:
    spec: CaseSpec
    grid: GridSpec
    viscosity: float
    density: float
    meta: dict
    times: list = field(default_factory=list)
    U_bar: list = field(default_factory=list)
    w: list = field(default_factory=list)
    sgs_forcing: list = field(default_factory=list)
    stats: list = field(default_factory=list)

    def case_data(self, field_name: str = "w") -> CaseData:
        fields = self.w if field_name == "w" else self.U_bar
        return CaseData(self.spec.case_id, self.grid, self.viscosity, self.density, self.meta["dt_les"],
                        list(fields), list(self.times), self.meta["urms0"], self.meta["t_l0"])

    def add(self, time: float, arrays: dict, stats: dict) -> None:
        self.times.append(time)
        self.U_bar.append(arrays["U_bar"])
        self.w.append(arrays["w"])
        self.sgs_forcing.append(arrays["sgs_forcing"])
        self.stats.append(stats)


def generate_case(cfg: ExperimentConfig, spec: CaseSpec,
                  on_fine: Callable[[int, FluidState], None] | None = None) -> CoarseCase:
    """DNS plus filtering in memory; ``on_fine`` sees every stored fine state."""
    grid = dns_grid(cfg)
    fspec = filter_spec(cfg)
    holder = {}

    def sink(i, state, meta):
        if on_fine is not None:
            on_fine(i, state)
        if "case" not in holder:
            holder["case"] = CoarseCase(spec, fspec.coarse_grid(grid), state.viscosity, state.density, meta)
        arrays, stats = coarse_arrays(state.u, grid, fspec)
        holder["case"].add(state.time, arrays, stats)

    run_dns(cfg, spec, sink)
    return holder["case"]


# ---------------------------------------------------------------------------
# model construction and training


def train_config(cfg: ExperimentConfig, divergence_free: bool | None = None) -> TrainConfig:
    t = cfg.training
    return TrainConfig(window_steps=t.window_steps, les_to_dns_step_ratio=cfg.les.dns_steps_per_les_step,
                       learning_rate=t.learning_rate, lr_decay_iterations=t.lr_decay_iterations,
                       rmsprop_rho=t.rmsprop_rho, rmsprop_eps=t.rmsprop_eps,
                       divergence_free=t.divergence_free if divergence_free is None else divergence_free,
                       compare=t.compare, blowup_factor=cfg.les.blowup_factor)


def initial_model(cfg: ExperimentConfig, train_cases: list[CoarseCase], name: str = "dpm") -> NeuralClosure:
    """Xavier-initialized network with feature and output scales from the training data."""
    m = cfg.model
    fields = [u for c in train_cases for u in c.w]
    dx = train_cases[0].grid.dx
    probe = NeuralClosure.create(1, derivative_set=m.derivative_set, output_mode=m.output_mode)
    scales = feature_rms(fields, dx, probe.features)
    if m.output_scale == "auto":
        key = "sgs_forcing_rms" if m.output_mode == "direct_forcing" else "tau_rms"
        values = np.array([s[key] for c in train_cases for s in c.stats])
        output_scale = float(np.sqrt(np.mean(values**2)))
    else:
        output_scale = float(m.output_scale)
    model = NeuralClosure.create(m.hidden, seed=m.init_seed, derivative_set=m.derivative_set,
                                 output_mode=m.output_mode, scales=scales, output_scale=output_scale)
    model.name = name
    return model


def train_model(cfg: ExperimentConfig, train_cases: list[CoarseCase], mode: str, divergence_free: bool,
                checkpoint_path=None, resume: bool = False) -> tuple[NeuralClosure, TrainState]:
    name = MODEL_NAMES[(mode, divergence_free)]
    model = initial_model(cfg, train_cases, name)
    tcfg = train_config(cfg, divergence_free)
    train = None
    if resume and checkpoint_path is not None and Path(checkpoint_path).is_file():
        saved, train = load_checkpoint(checkpoint_path)
        if saved.params.dims != model.params.dims:
            raise DataError("checkpoint does not match the configured model")
        model = saved
    if mode == "adjoint":
        field_name = "w" if divergence_free else "U_bar"
        dataset = [c.case_data(field_name) for c in train_cases]

        def ckpt(state):
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, state)

        train = train_sam(model, dataset, tcfg, cfg.training.iterations, train=train, seed=cfg.training.seed,
                          checkpoint=ckpt, checkpoint_every=cfg.training.checkpoint_every,
                          progress_every=max(cfg.training.iterations // 20, 1))
    else:
        samples = [(u, f) for c in train_cases for u, f in zip(c.U_bar, c.sgs_forcing)]
        train = apriori_train(model, samples, train_cases[0].grid, tcfg, cfg.training.apriori_iterations,
                              seed=cfg.training.seed, train=train)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, train)
    return model.with_params(train.theta), train


# ---------------------------------------------------------------------------
# evaluation


def baseline_closures(cfg: ExperimentConfig) -> dict:
    return {"no_model": None, "smagorinsky": Smagorinsky(cfg.les.smagorinsky_cs),
            "dynamic_smagorinsky": DynamicSmagorinsky()}


def evaluate_case(cfg: ExperimentConfig, case: CoarseCase, closures: dict, spectrum_every: int = 0) -> dict:
    """Held-out window losses and decay curves; closures named ``*_nodiv`` run without projection."""
    W = cfg.training.window_steps
    out = {"losses": {}, "decay": {}}
    for divfree in (True, False):
        group = {k: v for k, v in closures.items() if k.endswith("_nodiv") != divfree}
        if not group:
            continue
        data = case.case_data("w" if divfree else "U_bar")
        for name, closure in group.items():
            out["losses"][name] = heldout_window_loss(data, closure, W, divfree, cfg.les.blowup_factor)
        res = decay_experiment(data, group, projection=divfree, spectrum_every=spectrum_every,
                               blowup_factor=cfg.les.blowup_factor)
        out["decay"]["projected" if divfree else "unprojected"] = res
    return out


def summarize(evaluation: dict) -> dict:
    rows = {}
    for group, res in evaluation["decay"].items():
        for name in res.curves:
            rows[name] = {"window_loss": evaluation["losses"][name], "decay_l1": res.l1(name),
                          "blowup_time": res.curves[name].blowup_time, "reference": group}
    return rows


# ---------------------------------------------------------------------------
# on-disk stages


def _out(cfg: ExperimentConfig, out_dir=None) -> Path:
    return Path(out_dir if out_dir is not None else cfg.experiment.output_dir)


def _snap_path(root: Path, kind: str, case_id: str, i: int) -> Path:
    return root / kind / case_id / f"snap_{i:05d}.dpms"


def stage_dns(cfg: ExperimentConfig, out_dir=None, cases: list[str] | None = None) -> list[dict]:
    root = _out(cfg, out_dir)
    chash = cfg.data_hash()
    metas = []
    for spec in case_specs(cfg):
        if cases and spec.case_id not in cases:
            continue

        def sink(i, state, meta, spec=spec):
            snap = Snapshot("dns", state.grid, state.time, state.viscosity, state.density,
                            {"u": state.u, "p": state.p}, spec.case_id, spec.seed, chash,
                            dict(meta, index=i))
            write_snapshot(snap, _snap_path(root, "dns", spec.case_id, i))

        metas.append(run_dns(cfg, spec, sink))
        log.info("dns case %s: %d snapshots", spec.case_id, metas[-1]["n_store"])
    return metas


def _read_case_snaps(root: Path, kind: str, case_id: str) -> list[Snapshot]:
    files = sorted((root / kind / case_id).glob("snap_*.dpms"))
    if not files:
        raise DataError(f"no {kind} snapshots for case {case_id} under {root}")
    return [read_snapshot(f) for f in files]


def _check_hash(snap: Snapshot, cfg: ExperimentConfig, path_hint: str) -> None:
    if snap.config_hash != cfg.data_hash():
        raise DataError(f"{path_hint} was produced by data config {snap.config_hash}, "
                        f"current data config is {cfg.data_hash()}")


def stage_filter(cfg: ExperimentConfig, out_dir=None) -> int:
    root = _out(cfg, out_dir)
    fspec = filter_spec(cfg)
    chash = cfg.data_hash()
    count = 0
    for spec in case_specs(cfg):
        files = sorted((root / "dns" / spec.case_id).glob("snap_*.dpms"))
        if not files:
            raise DataError(f"no dns snapshots for case {spec.case_id}; run `dpm dns` first")
        for f in files:
            snap = read_snapshot(f)
            _check_hash(snap, cfg, str(f))
            arrays, stats = coarse_arrays(snap.arrays["u"], snap.grid, fspec)
            meta = dict(snap.meta, **stats, filter_ratio=fspec.ratio, source=f.name)
            out = Snapshot("coarse_target", fspec.coarse_grid(snap.grid), snap.time, snap.viscosity, snap.density,
                           arrays, spec.case_id, spec.seed, chash, meta)
            write_snapshot(out, _snap_path(root, "targets", spec.case_id, snap.meta["index"]))
            count += 1
    return count


def load_coarse_case(cfg: ExperimentConfig, spec: CaseSpec, out_dir=None) -> CoarseCase:
    root = _out(cfg, out_dir)
    snaps = _read_case_snaps(root, "targets", spec.case_id)
    first = snaps[0]
    _check_hash(first, cfg, f"targets/{spec.case_id}")
    meta = {k: first.meta[k] for k in ("case_id", "mu_ratio", "seed", "role", "urms0", "t_l0", "eps0",
                                          "dt_dns", "dt_les", "n_decay", "n_store", "stride")}
    case = CoarseCase(spec, first.grid, first.viscosity, first.density, meta)
    for s in snaps:
        if s.grid != first.grid:
            raise DataError(f"case {spec.case_id} mixes grid geometries")
        case.add(s.time, s.arrays, {k: s.meta[k] for k in ("tau_rms", "sgs_forcing_rms")})
    return case


def load_cases(cfg: ExperimentConfig, role: str, out_dir=None) -> list[CoarseCase]:
    return [load_coarse_case(cfg, s, out_dir) for s in case_specs(cfg) if s.role == role]


def stage_train(cfg: ExperimentConfig, out_dir=None, mode: str | None = None, divergence_free: bool | None = None,
                resume: bool = False) -> Path:
    root = _out(cfg, out_dir)
    mode = mode or cfg.training.mode
    divfree = cfg.training.divergence_free if divergence_free is None else divergence_free
    name = MODEL_NAMES[(mode, divfree)]
    model, train = train_model(cfg, load_cases(cfg, "train", root), mode, divfree,
                               checkpoint_path=root / "checkpoints" / f"{name}.dpmc", resume=resume)
    path = root / "models" / f"{name}.dpmm"
    save_model(model, path, extra={"config_hash": cfg.config_hash(), "mode": mode, "divergence_free": divfree,
                                   "iterations": train.k, "skipped": len(train.events)})
    return path


def resolve_closure(cfg: ExperimentConfig, name: str, out_dir=None):
    base = baseline_closures(cfg)
    if name in base:
        return base[name]
    root = _out(cfg, out_dir)
    path = root / "models" / f"{name}.dpmm"
    if not path.is_file():
        raise DataError(f"model {name} not found at {path}; run `dpm train` first")
    model = load_model(path)
    model.name = name
    return model


def stage_les(cfg: ExperimentConfig, closure_name: str, out_dir=None) -> Path:
    root = _out(cfg, out_dir)
    closure = resolve_closure(cfg, closure_name, root)
    results, summary = {}, {}
    for case in load_cases(cfg, "test", root):
        ev = evaluate_case(cfg, case, {closure_name: closure}, cfg.evaluation.spectrum_every)
        res = next(iter(ev["decay"].values()))
        results[case.spec.case_id] = res
        summary[case.spec.case_id] = summarize(ev)[closure_name]
    target = root / "les" / closure_name
    write_decay_csv(results, target / "decay.csv")
    write_spectrum_csv(results, target / "spectrum.csv")
    _write_json(target / "summary.json", {"config_hash": cfg.config_hash(), "cases": summary})
    return target


def stage_compare(cfg: ExperimentConfig, out_dir=None) -> Path:
    root = _out(cfg, out_dir)
    closures = {name: resolve_closure(cfg, name, root) for name in cfg.evaluation.closures}
    results: dict[str, DecayResult] = {}
    table = {}
    grid = None
    for case in load_cases(cfg, "test", root):
        if grid is not None and case.grid != grid:
            raise DataError("test cases use different grid geometries")
        grid = case.grid
        ev = evaluate_case(cfg, case, closures, cfg.evaluation.spectrum_every)
        for group, res in ev["decay"].items():
            results[f"{case.spec.case_id}:{group}"] = res
        table[case.spec.case_id] = summarize(ev)
    target = root / "compare"
    write_decay_csv(results, target / "decay.csv")
    write_spectrum_csv(results, target / "spectrum.csv")
    _write_json(target / "summary.json", {"config_hash": cfg.config_hash(), "cases": table})
    (target / "report.txt").write_text(format_report(table))
    return target


def format_report(table: dict) -> str:
    lines = []
    for case_id, rows in table.items():
        lines.append(f"case {case_id}")
        lines.append(f"  {'closure':<22}{'window_loss':>14}{'decay_L1':>12}")
        for name, r in rows.items():
            lines.append(f"  {name:<22}{r['window_loss']:>14.6g}{r['decay_l1']:>12.5g}")
        lines.append("")
    return "\n".join(lines)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def check_config(cfg: ExperimentConfig) -> None:
    """Cheap consistency checks that need derived quantities."""
    g = dns_grid(cfg)
    if not cfg.physics.peak_wavenumber < g.n / 2:
        raise ConfigError("physics.peak_wavenumber must be below dns_n / 2")
