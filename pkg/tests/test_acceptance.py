"""Acceptance suite: one test per criterion, each printed as a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (or ``python
tests/test_acceptance.py``). The desk-scale experiment (criteria 5 to 8) builds
64^3 DNS data for six cases, trains three networks and evaluates them on the
held-out case; it takes several minutes on one core.
"""

from __future__ import annotations

import filecmp
import time
from pathlib import Path

import numpy as np
import pytest

from dpm import pipeline
from dpm.adjoint import forward_window, gradient_check, transpose_test
from dpm.analysis import table1_report
from dpm.burgers import burgers_gradcheck
from dpm.cli import main as cli_main
from dpm.config import ExperimentConfig
from dpm.filtering import FilterSpec, box_filter, divfree_project, downsample
from dpm.grid import GridSpec
from dpm.network import NeuralClosure, param_count
from dpm.solver import (
    FluidState,
    SolverConfig,
    divergence,
    init_isotropic,
    laplacian,
    poisson_solve,
    run,
    step,
    u_rms,
)

SAM_ITERATIONS = 500
APRIORI_ITERATIONS = 2000

REPORT: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    REPORT[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------
# desk-scale experiment, shared by criteria 5 to 8


def desk_config() -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.training.iterations = SAM_ITERATIONS
    cfg.training.apriori_iterations = APRIORI_ITERATIONS
    return cfg


@pytest.fixture(scope="session")
def desk():
    cfg = desk_config()
    fine = {}
    cases = {}
    for spec in pipeline.case_specs(cfg):
        keep = spec.mu_ratio == cfg.cases.heldout

        def on_fine(i, state, keep=keep):
            if keep and i == 0:
                fine["u"] = state.u.copy()
                fine["grid"] = state.grid

        cases[spec.case_id] = pipeline.generate_case(cfg, spec, on_fine)
    train = [c for c in cases.values() if c.spec.role == "train"]
    heldout = next(c for c in cases.values() if c.spec.mu_ratio == cfg.cases.heldout)
    models, seconds = {}, {}
    for mode, divfree in (("adjoint", True), ("adjoint", False), ("apriori", True)):
        t0 = time.perf_counter()
        model, state = pipeline.train_model(cfg, train, mode, divfree)
        seconds[model.name] = time.perf_counter() - t0
        models[model.name] = (model, state)
    closures = dict(pipeline.baseline_closures(cfg))
    closures.update({name: m for name, (m, _) in models.items()})
    summary = pipeline.summarize(pipeline.evaluate_case(cfg, heldout, closures))
    return {"cfg": cfg, "cases": cases, "heldout": heldout, "fine": fine, "models": models,
            "summary": summary, "train_seconds": seconds}


# ---------------------------------------------------------------------------
# criteria


def test_criterion_1_parameter_counts():
    t0 = time.perf_counter()
    got = {N_H: param_count(273, N_H, 18) for N_H in (5, 25, 50, 100, 200)}
    expected = {5: 4278, 25: 22318, 50: 47118, 100: 104218, 200: 248418}
    elapsed = time.perf_counter() - t0
    record(1, got == expected and elapsed < 1.0, f"counts={list(got.values())} time={elapsed:.2e}s")


def test_criterion_2_adjoint_exactness():
    t0 = time.perf_counter()
    grid = GridSpec(16)
    s = init_isotropic(grid, 1.0, 3.0, seed=21, viscosity=0.02)
    model = NeuralClosure.create(5, seed=3, derivative_set="full_hessian", output_mode="paper_k18",
                                 output_scale=0.1)
    cfg = SolverConfig(0.02, closure=model)
    transpose = transpose_test(forward_window(s, cfg, 2), seed=5)["rel_error"]
    target = {2: init_isotropic(grid, 1.0, 3.0, seed=22, viscosity=0.02).u}
    fd3 = gradient_check(s, cfg, 2, target, seed=6)["best_rel_error"]
    burgers = burgers_gradcheck()["best_rel_error"]
    elapsed = time.perf_counter() - t0
    ok = transpose <= 1e-11 and burgers <= 1e-9 and fd3 <= 1e-6 and elapsed < 300
    record(2, ok, f"transpose={transpose:.2e} burgers={burgers:.2e} fd3d={fd3:.2e} time={elapsed:.1f}s")


def test_criterion_3_projection():
    rng = np.random.default_rng(8)
    grid = GridSpec(16)
    dx = grid.dx
    fine = init_isotropic(GridSpec(64), 1.0, 6.0, seed=9)
    spec = FilterSpec(4)
    fields = [rng.standard_normal((3,) + grid.shape), downsample(box_filter(fine.u, spec), spec)]
    worst_div = worst_idem = 0.0
    for U in fields:
        w, _ = divfree_project(U, dx)
        worst_div = max(worst_div, np.max(np.abs(divergence(w, dx))) / (u_rms(U) / dx))
        w2, _ = divfree_project(w, dx)
        worst_idem = max(worst_idem, np.max(np.abs(w2 - w)) / np.max(np.abs(w)))
    free = init_isotropic(grid, 1.0, 3.0, seed=10).u
    fixed = np.max(np.abs(divfree_project(free, dx)[0] - free)) / np.max(np.abs(free))
    ok = worst_div <= 1e-12 and worst_idem <= 1e-12 and fixed <= 1e-12
    record(3, ok, f"div={worst_div:.2e} idempotence={worst_idem:.2e} fixed_point={fixed:.2e}")


def taylor_green_error(n: int, nu: float = 0.1, t_end: float = 0.1, c: float = 0.1) -> float:
    g = GridSpec(n)
    x, y = g.face_coords(0), g.face_coords(1)
    u = np.zeros((3,) + g.shape)
    u[0] = np.sin(x[0]) * np.cos(x[1])
    u[1] = -np.cos(y[0]) * np.sin(y[1])
    nsteps = int(np.ceil(t_end / (c * g.dx**2)))
    s = run(FluidState(g, u, g.zeros_scalar(), 0.0, nu), SolverConfig(t_end / nsteps), nsteps)
    return float(np.max(np.abs(s.u - u * np.exp(-2.0 * nu * t_end))))


def test_criterion_4_solver_verification():
    t0 = time.perf_counter()
    ns = np.array([16, 32, 64])
    errs = np.array([taylor_green_error(n) for n in ns])
    order = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    rng = np.random.default_rng(4)
    worst = 0.0
    for n in (16, 32):
        dx = 2 * np.pi / n
        phi = rng.standard_normal((n, n, n))
        phi -= phi.mean()
        worst = max(worst, np.max(np.abs(poisson_solve(laplacian(phi, dx), dx) - phi)) / np.max(np.abs(phi)))
    elapsed = time.perf_counter() - t0
    ok = abs(order - 2.0) <= 0.2 and worst <= 1e-12 and elapsed < 120
    record(4, ok, f"order={order:.3f} errors={errs.tolist()} poisson={worst:.2e} time={elapsed:.1f}s")


def test_criterion_5_discretization_trend(desk):
    rows = table1_report(desk["fine"]["u"], desk["fine"]["grid"], [2, 4, 8])
    delta = [r["delta_ratio"] for r in rows]
    div = [r["mean_div_les_ratio"] for r in rows]
    increasing = all(b > a for a, b in zip(delta, delta[1:]))
    comparable = all(0.1 <= d / e <= 10.0 for d, e in zip(div, delta))
    record(5, increasing and comparable,
           f"delta_ratio={np.round(delta, 5).tolist()} mean_div_ratio={np.round(div, 5).tolist()}")


def test_criterion_6_training_effectiveness(desk):
    s = desk["summary"]
    dpm, none, smag = s["dpm"], s["no_model"], s["smagorinsky"]
    ok = (dpm["window_loss"] < none["window_loss"] and dpm["window_loss"] < smag["window_loss"]
          and dpm["decay_l1"] <= none["decay_l1"] and dpm["decay_l1"] <= smag["decay_l1"]
          and desk["models"]["dpm"][1].k <= 5000)
    detail = " ".join(f"{k}:loss={v['window_loss']:.4g},L1={v['decay_l1']:.4g}" for k, v in s.items())
    record(6, ok, f"iterations={desk['models']['dpm'][1].k} {detail}")


def test_criterion_7_apriori_inferior(desk):
    s = desk["summary"]
    ok = s["dpm_apriori"]["window_loss"] >= s["dpm"]["window_loss"]
    record(7, ok, f"apriori={s['dpm_apriori']['window_loss']:.4g} adjoint={s['dpm']['window_loss']:.4g}")


def _step_seconds(state: FluidState, projection: bool, repeats: int = 7, nsteps: int = 20) -> float:
    cfg = SolverConfig(0.01, projection_enabled=projection)
    best = np.inf
    for _ in range(repeats):
        s = state
        t0 = time.perf_counter()
        for _ in range(nsteps):
            s = step(s, cfg)
        best = min(best, (time.perf_counter() - t0) / nsteps)
    return best


def test_criterion_8_nodiv_variant(desk):
    s = desk["summary"]
    case = desk["heldout"]
    state = case.case_data("U_bar").initial_state(0)
    t_on = _step_seconds(state, True)
    t_off = _step_seconds(state, False)
    ratio = s["dpm_nodiv"]["window_loss"] / s["dpm"]["window_loss"]
    finished = desk["models"]["dpm_nodiv"][1].k == SAM_ITERATIONS and np.isfinite(s["dpm_nodiv"]["decay_l1"])
    ok = finished and t_off < t_on and ratio <= 2.0
    record(8, ok, f"step_on={t_on * 1e3:.3f}ms step_off={t_off * 1e3:.3f}ms loss_ratio={ratio:.3f} "
                  f"nodiv_loss={s['dpm_nodiv']['window_loss']:.4g}")


TINY = """
[grid]
dns_n = 16
[physics]
peak_wavenumber = 3
[cases]
train = 1.0, 2.0
test = 1.5
heldout = 1.5
[dns]
duration = 0.6
[filter]
ratio = 2
[model]
hidden = 2
derivative_set = paper_text
[training]
iterations = 4
window_steps = 2
apriori_iterations = 6
checkpoint_every = 2
[evaluation]
closures = no_model, smagorinsky, dynamic_smagorinsky, dpm, dpm_nodiv, dpm_apriori
spectrum_every = 2
"""


def _run_all_stages(cfg_path: Path, out: Path) -> None:
    base = ["--config", str(cfg_path), "--out", str(out)]
    for argv in (["dns"], ["filter"], ["train"], ["train", "--divfree", "off"], ["train", "--mode", "apriori"],
                 ["les", "--closure", "dpm"], ["compare"]):
        assert cli_main(argv + base) == 0, argv


def _tree_files(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_criterion_9_determinism(tmp_path):
    cfg_path = tmp_path / "tiny.ini"
    cfg_path.write_text(TINY)
    a, b = tmp_path / "a", tmp_path / "b"
    _run_all_stages(cfg_path, a)
    _run_all_stages(cfg_path, b)
    files = _tree_files(a)
    same_names = files == _tree_files(b)
    mismatched = [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    # one desk-scale DNS case at full resolution
    desk_cfg = ExperimentConfig()
    held = next(s for s in pipeline.case_specs(desk_cfg) if s.mu_ratio == desk_cfg.cases.heldout)
    pipeline.stage_dns(desk_cfg, tmp_path / "d1", [held.case_id])
    pipeline.stage_dns(desk_cfg, tmp_path / "d2", [held.case_id])
    desk_files = _tree_files(tmp_path / "d1")
    mismatched += [str(f) for f in desk_files
                   if not filecmp.cmp(tmp_path / "d1" / f, tmp_path / "d2" / f, shallow=False)]
    ok = same_names and not mismatched and len(files) > 20 and len(desk_files) > 20
    record(9, ok, f"compared={len(files) + len(desk_files)} files mismatched={mismatched[:3]}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
