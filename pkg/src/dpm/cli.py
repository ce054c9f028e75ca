"""Command line entry point ``dpm``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
Failures print a single line ``error code=<n> kind=<kind> message=<json string>``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from . import pipeline
from .adjoint import forward_window, gradient_check
from .analysis import format_table, table1_report, write_table1_csv
from .burgers import burgers_gradcheck
from .config import ConfigError, ExperimentConfig, load_config
from .grid import GridSpec
from .io import RecordError, read_snapshot
from .network import NeuralClosure
from .solver import FluidState, SolverBlowUp, SolverConfig, init_isotropic

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

BURGERS_TOL = 1e-9
LES3D_FD_TOL = 1e-6
TRANSPOSE_TOL = 1e-11


class NumericalFailure(RuntimeError):
    """A check or run produced values outside its tolerance."""


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    pipeline.check_config(cfg)
    return cfg


def _out(args, cfg):
    return args.out if args.out else cfg.experiment.output_dir


def cmd_dns(args) -> int:
    cfg = _config(args)
    metas = pipeline.stage_dns(cfg, _out(args, cfg), args.case or None)
    for m in metas:
        print(f"dns case={m['case_id']} snapshots={m['n_store']} t_l0={m['t_l0']:.6g} dt_les={m['dt_les']:.6g}")
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _config(args)
    n = pipeline.stage_filter(cfg, _out(args, cfg))
    print(f"filter targets={n} ratio={cfg.filter.ratio}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    divfree = None if args.divfree is None else args.divfree == "on"
    path = pipeline.stage_train(cfg, _out(args, cfg), args.mode, divfree, resume=args.resume)
    print(f"train model={path}")
    return EXIT_OK


def cmd_les(args) -> int:
    cfg = _config(args)
    target = pipeline.stage_les(cfg, args.closure, _out(args, cfg))
    summary = json.loads((target / "summary.json").read_text())
    for case_id, row in summary["cases"].items():
        print(f"les closure={args.closure} case={case_id} window_loss={row['window_loss']:.6g} "
              f"decay_l1={row['decay_l1']:.6g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    target = pipeline.stage_compare(cfg, _out(args, cfg))
    print((target / "report.txt").read_text(), end="")
    return EXIT_OK


def _burgers_report() -> dict:
    res = burgers_gradcheck()
    print("burgers gradcheck (discrete adjoint vs central differences)")
    for r in res["rows"]:
        print(f"  step={r['step']:.1e} fd={r['fd']:+.15e} rel_error={r['rel_error']:.3e}")
    print(f"  adjoint={res['adjoint']:+.15e} best_rel_error={res['best_rel_error']:.3e}")
    if not res["best_rel_error"] <= BURGERS_TOL:
        raise NumericalFailure(f"burgers gradient error {res['best_rel_error']:.3e} exceeds {BURGERS_TOL:g}")
    return res


def _les3d_report(n: int = 16, steps: int = 2, hidden: int = 5, seed: int = 0) -> dict:
    grid = GridSpec(n)
    u0 = init_isotropic(grid, 1.0, 3.0, seed, 0.02).u
    state = FluidState(grid, u0, np.zeros(grid.shape), 0.0, 0.02)
    model = NeuralClosure.create(hidden, seed=seed + 1, derivative_set="full_hessian", output_mode="paper_k18",
                                 output_scale=0.1)
    cfg = SolverConfig(0.02, closure=model)
    targets = {steps: forward_window(init_isotropic(grid, 1.0, 3.0, seed + 2, 0.02), cfg, steps).states[-1].u}
    res = gradient_check(state, cfg, steps, targets, seed=seed)
    print(f"les3d gradcheck (n={n}, window={steps}, hidden={hidden})")
    for r in res["rows"]:
        print(f"  step={r['step']:.1e} fd={r['fd']:+.15e} rel_error={r['rel_error']:.3e}")
    t = res["transpose"]
    print(f"  adjoint={res['adjoint']:+.15e} best_rel_error={res['best_rel_error']:.3e}")
    print(f"  transpose lhs={t['lhs']:+.15e} rhs={t['rhs']:+.15e} rel_error={t['rel_error']:.3e}")
    if not t["rel_error"] <= TRANSPOSE_TOL:
        raise NumericalFailure(f"transpose error {t['rel_error']:.3e} exceeds {TRANSPOSE_TOL:g}")
    if not res["best_rel_error"] <= LES3D_FD_TOL:
        raise NumericalFailure(f"3D gradient error {res['best_rel_error']:.3e} exceeds {LES3D_FD_TOL:g}")
    return res


def cmd_gradcheck(args) -> int:
    both = not (args.burgers or args.les3d)
    if args.burgers or both:
        _burgers_report()
    if args.les3d or both:
        _les3d_report()
    return EXIT_OK


def cmd_burgers_gradcheck(args) -> int:
    _burgers_report()
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma separated integer list, got {text!r}") from None


def cmd_diagnose(args) -> int:
    snap = read_snapshot(args.snapshot)
    if "u" not in snap.arrays:
        raise pipeline.DataError(f"snapshot {args.snapshot} holds no velocity field")
    explicit = []
    for pair in args.explicit or ():
        values = _int_list(pair)
        if len(values) != 2:
            raise ConfigError(f"--explicit expects FILTER,SAMPLE, got {pair!r}")
        explicit.append(tuple(values))
    try:
        rows = table1_report(snap.arrays["u"], snap.grid, _int_list(args.ratios), explicit)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(format_table(rows))
    if args.csv:
        write_table1_csv(rows, args.csv)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpm", description="Adjoint-trained neural closures for coarse LES.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def staged(name, func, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="INI experiment configuration (defaults when omitted)")
        s.add_argument("--out", help="output directory (overrides experiment.output_dir)")
        s.set_defaults(func=func)
        return s

    s = staged("dns", cmd_dns, "generate DNS snapshots for the case matrix")
    s.add_argument("--case", action="append", help="restrict to a case id (repeatable)")
    staged("filter", cmd_filter, "filter and downsample DNS snapshots into coarse targets")
    s = staged("train", cmd_train, "train a closure (stochastic adjoint or a priori)")
    s.add_argument("--mode", choices=("adjoint", "apriori"))
    s.add_argument("--divfree", choices=("on", "off"))
    s.add_argument("--resume", action="store_true", help="continue from the stored checkpoint")
    s = staged("les", cmd_les, "evaluate one closure on the test cases")
    s.add_argument("--closure", required=True)
    staged("compare", cmd_compare, "evaluate all configured closures and write reports")

    s = sub.add_parser("gradcheck", help="adjoint verification reports")
    s.add_argument("--burgers", action="store_true")
    s.add_argument("--les3d", action="store_true")
    s.set_defaults(func=cmd_gradcheck)
    s = sub.add_parser("burgers-gradcheck", help="same as gradcheck --burgers")
    s.set_defaults(func=cmd_burgers_gradcheck)

    s = sub.add_parser("diagnose", help="discretization diagnostics of a DNS snapshot")
    s.add_argument("--snapshot", required=True)
    s.add_argument("--ratios", default="2,4,8", help="implicit coarsening ratios")
    s.add_argument("--explicit", action="append", help="FILTER,SAMPLE ratio pair (repeatable)")
    s.add_argument("--csv", help="also write the table as CSV")
    s.set_defaults(func=cmd_diagnose)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(f"error code={code} kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        return _fail(EXIT_CONFIG, "usage", "invalid command line")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    start = time.perf_counter()
    try:
        code = args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (pipeline.DataError, RecordError, FileNotFoundError) as exc:
        return _fail(EXIT_CONFIG, "data", str(exc))
    except SolverBlowUp as exc:
        return _fail(EXIT_NUMERICAL, "blowup", str(exc))
    except (NumericalFailure, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    logging.getLogger(__name__).info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
