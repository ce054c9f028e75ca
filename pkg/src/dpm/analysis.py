"""Evaluation: resolved-energy decay, spectra, held-out losses and Table-1 style diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adjoint import forward_window, window_loss
from .filtering import FilterSpec, box_filter, discretization_diagnostics
from .grid import GridSpec, Spectrum, face_to_center, shell_spectrum
from .solver import FluidState, SolverBlowUp, SolverConfig, step
from .training import CaseData


def resolved_tke(u: np.ndarray) -> float:
    """Half the domain mean of ``c . c`` with ``c`` the center-interpolated velocity."""
    c = face_to_center(u)
    return 0.5 * float(np.mean(np.sum(c * c, axis=0)))


@dataclass(frozen=True)
class CaseSpec:
    mu_ratio: float
    urms0: float
    seed: int
    role: str

    def __post_init__(self):
        if not self.mu_ratio > 0:
            raise ValueError("viscosity ratio must be positive")
        if self.role not in ("train", "test"):
            raise ValueError("role must be train or test")

    @property
    def case_id(self) -> str:
        return f"mu{self.mu_ratio:.3f}".replace(".", "p")


@dataclass
class DecayCurve:
    closure: str
    times: np.ndarray
    kbar: np.ndarray
    blowup_time: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.kbar = np.asarray(self.kbar, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("decay-curve times must be strictly increasing")


@dataclass
class DecayResult:
    reference: DecayCurve
    curves: dict[str, DecayCurve]
    spectra: dict[str, list[tuple[float, Spectrum]]] = field(default_factory=dict)

    def l1(self, name: str) -> float:
        return l1_distance(self.curves[name], self.reference)


def l1_distance(curve: DecayCurve, reference: DecayCurve) -> float:
    """Trapezoid integral of ``|k_model - k_ref|`` over normalized time; ``inf`` after a blow-up."""
    if curve.blowup_time is not None:
        return float("inf")
    if len(curve.times) != len(reference.times) or not np.allclose(curve.times, reference.times):
        raise ValueError("curves must share the same time samples")
    d = np.abs(curve.kbar - reference.kbar)
    return float(np.sum(0.5 * (d[1:] + d[:-1]) * np.diff(curve.times)))


def _reference_curve(case: CaseData, nsteps: int) -> DecayCurve:
    t = np.array(case.times[:nsteps + 1]) / case.t_l0
    k = np.array([resolved_tke(f) for f in case.fields[:nsteps + 1]]) / case.urms0**2
    return DecayCurve("filtered_dns", t, k)


def run_les(case: CaseData, closure, nsteps: int, projection: bool = True, blowup_factor: float = 1000.0,
            spectrum_every: int = 0, start: int = 0):
    """LES from ``case.fields[start]``; returns ``(curve, spectra, final_state)``."""
    cfg = SolverConfig(case.dt, projection_enabled=projection, closure=closure,
                       blowup_bound=blowup_factor * case.urms0)
    state = case.initial_state(start)
    times, ks, spectra = [state.time], [resolved_tke(state.u)], []
    blowup = None

    def record_spectrum(i, s):
        if spectrum_every and i % spectrum_every == 0:
            spectra.append((s.time / case.t_l0, shell_spectrum(s.u, s.grid)))

    record_spectrum(0, state)
    for i in range(1, nsteps + 1):
        try:
            state = step(state, cfg)
        except SolverBlowUp as exc:
            blowup = exc.time / case.t_l0
            break
        times.append(state.time)
        ks.append(resolved_tke(state.u))
        record_spectrum(i, state)
    name = getattr(closure, "name", "no_model") if closure is not None else "no_model"
    curve = DecayCurve(name, np.array(times) / case.t_l0, np.array(ks) / case.urms0**2, blowup)
    return curve, spectra, state


def decay_experiment(case: CaseData, closures: dict, nsteps: int | None = None, projection: bool = True,
                     spectrum_every: int = 0, blowup_factor: float = 1000.0) -> DecayResult:
    """Run every closure from the same initial field and record decay curves and spectra."""
    if nsteps is None:
        nsteps = len(case.fields) - 1
    if not 1 <= nsteps < len(case.fields):
        raise ValueError("nsteps must lie within the stored reference fields")
    ref = _reference_curve(case, nsteps)
    curves, spectra = {}, {}
    for name, closure in closures.items():
        curve, spec, _ = run_les(case, closure, nsteps, projection, blowup_factor, spectrum_every)
        curve.closure = name
        curves[name] = curve
        spectra[name] = spec
    if spectrum_every:
        spectra["filtered_dns"] = [(case.times[i] / case.t_l0, shell_spectrum(case.fields[i], case.grid))
                                   for i in range(0, nsteps + 1, spectrum_every)]
    return DecayResult(ref, curves, spectra)


def heldout_window_loss(case: CaseData, closure, window_steps: int, projection: bool = True,
                        blowup_factor: float = 1000.0) -> float:
    """Mean end-of-window loss over the non-overlapping windows starting at 0, W, 2W, ..."""
    cfg = SolverConfig(case.dt, projection_enabled=projection, closure=closure,
                       blowup_bound=blowup_factor * case.urms0)
    losses = []
    for n in range(0, len(case.fields) - window_steps, window_steps):
        try:
            traj = forward_window(case.initial_state(n), cfg, window_steps)
        except SolverBlowUp:
            return float("inf")
        losses.append(window_loss(traj, {window_steps: case.fields[n + window_steps]}))
    if not losses:
        raise ValueError("case is shorter than one window")
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Table 1


TABLE1_COLUMNS = ("kind", "filter_ratio", "sample_ratio", "delta_ratio", "max_div_dns", "mean_div_dns",
                  "max_div_les_ratio", "mean_div_les_ratio")


def table1_report(u_dns: np.ndarray, grid: GridSpec, ratios, explicit=()) -> list[dict]:
    """Diagnostics of filtered DNS on coarse meshes.

    ``ratios`` gives implicit rows (filter width equal to the sampling spacing);
    ``explicit`` holds ``(filter_ratio, sample_ratio)`` pairs with a wider filter.
    """
    rows = []
    pairs = [("implicit", r, r) for r in ratios] + [("explicit", f, s) for f, s in explicit]
    for kind, f, s in pairs:
        spec = FilterSpec(f)
        spec.check(grid.n)
        FilterSpec(s).check(grid.n)
        d = discretization_diagnostics(box_filter(u_dns, spec), grid, spec, sample_ratio=s)
        d["kind"] = kind
        rows.append(d)
    return rows


def format_table(rows: list[dict], columns=TABLE1_COLUMNS) -> str:
    def fmt(v):
        return f"{v:.4e}" if isinstance(v, float) else str(v)

    cells = [list(columns)] + [[fmt(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)


# ---------------------------------------------------------------------------
# CSV artifacts


def write_table1_csv(rows: list[dict], path) -> None:
    _write_csv(path, TABLE1_COLUMNS, ([r[c] for c in TABLE1_COLUMNS] for r in rows))


def write_decay_csv(results: dict[str, DecayResult], path) -> None:
    """Columns: case, closure, t_norm, kbar_norm."""
    def rows():
        for case_id, res in results.items():
            for c in [res.reference, *res.curves.values()]:
                for t, k in zip(c.times, c.kbar):
                    yield case_id, c.closure, repr(float(t)), repr(float(k))
    _write_csv(path, ("case", "closure", "t_norm", "kbar_norm"), rows())


def write_spectrum_csv(results: dict[str, DecayResult], path) -> None:
    """Columns: case, closure, t_norm, kappa, E."""
    def rows():
        for case_id, res in results.items():
            for name, snaps in res.spectra.items():
                for t, spec in snaps:
                    for kappa, e in zip(spec.shell_centers, spec.energy):
                        yield case_id, name, repr(float(t)), repr(float(kappa)), repr(float(e))
    _write_csv(path, ("case", "closure", "t_norm", "kappa", "E"), rows())


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
