"""Command line: run, hardy-verify, report, print-config.

Exit codes: 0 success, 2 configuration error, 3 numerics failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

from .bounds import (
    HardyParams,
    bliss_constant_sharp,
    constants_table,
    extremal_sweep,
    verification_suite,
)
from .config import ConfigError, SimConfig, format_config, parse_config
from .diagnostics import BoundParams, DiagnosticsError, read_records, report_from_records
from .fields import FieldError
from .linalg import SolverError
from .solver import NumericsError, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICS, EXIT_IO = 0, 2, 3, 4


def _load_config(path: str | None) -> SimConfig:
    if path is None:
        return SimConfig()
    text = Path(path).read_text()
    return parse_config(text)


def _print_report(rep) -> None:
    print(f"<eps_model>_T        = {rep.lhs:.6e}  (half-window {rep.lhs_half_window:.6e}, indicator {rep.convergence_indicator:.3%})")
    print(f"nu_eff = {rep.nu_eff:.6e}  Re_eff = {rep.re_eff:.6g}  beta = {rep.beta:.6e}")
    print(f"rhs_A = {rep.rhs_A:.6e}  satisfied: {rep.satisfied_A}")
    print(f"rhs_B = {rep.rhs_B:.6e}  satisfied: {rep.satisfied_B}  (grad variant {rep.rhs_B_grad:.6e}: {rep.satisfied_B_grad})")
    if rep.rhs_C is None:
        print(f"rhs_C: {rep.hypothesis_C}")
    else:
        print(f"rhs_C = {rep.rhs_C:.6e}  satisfied: {rep.satisfied_C}")
    if rep.note:
        print(f"note: {rep.note}")


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args.config)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = run(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericsError, SolverError) as exc:
        print(f"numerics failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    _print_report(summary.report)
    print(f"manifest sha256: {summary.manifest_hash}")
    if not summary.ok:
        for v in summary.violations:
            print(f"invariant violated: {v}", file=sys.stderr)
        return EXIT_NUMERICS
    return EXIT_OK


def cmd_hardy_verify(args) -> int:
    table = constants_table(args.reynolds)
    print("constant,value")
    for k, v in table.items():
        print(f"{k},{v:.10g}")
    rows = verification_suite(seed=args.seed, n_random=args.samples)
    hp = HardyParams(2.0, 6.0, -4.0)
    sweep, where = extremal_sweep(hp)
    print(f"extremal sweep (2,6,-4): sup ratio {sweep:.6f} at {where}")
    if args.sharp:
        sharp = bliss_constant_sharp(2.0, 6.0)
        s2, _ = extremal_sweep(hp, constant=sharp)
        print(f"extremal sweep with the sharp constant {sharp:.10g}: sup ratio {s2:.6f}")
    out = open(args.csv, "w", newline="") if args.csv else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["inequality", "function", "lhs", "rhs", "ratio", "pass"])
        for r in rows:
            w.writerow([r.inequality, r.function, f"{r.lhs:.17g}", f"{r.rhs:.17g}", f"{r.ratio:.17g}", int(r.passed)])
    finally:
        if out is not sys.stdout:
            out.close()
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed", file=sys.stderr)
    for r in failed:
        print(f"FAIL {r.inequality} {r.function}: ratio {r.ratio:.6f}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_NUMERICS


def _rel_diff(a, b) -> float:
    if isinstance(a, dict):
        return max((_rel_diff(a[k], b.get(k)) for k in a), default=0.0)
    if isinstance(a, (bool, str)) or a is None or b is None:
        return 0.0 if a == b else math.inf
    a, b = float(a), float(b)
    if math.isnan(a) and math.isnan(b):
        return 0.0
    if a == b:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


def cmd_report(args) -> int:
    d = Path(args.run_dir)
    try:
        cfg = parse_config((d / "config.ini").read_text())
        records = read_records(d / "diagnostics.csv")
    except (OSError, DiagnosticsError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not records:
        print(f"io error: {d / 'diagnostics.csv'} holds no records", file=sys.stderr)
        return EXIT_IO
    rep = report_from_records(records, BoundParams.from_config(cfg))
    _print_report(rep)
    stored = d / "bound_report.json"
    if stored.exists():
        diff = _rel_diff(json.loads(stored.read_text()), json.loads(json.dumps(rep.to_dict())))
        print(f"max relative difference from stored report: {diff:.3e}")
    return EXIT_OK


def cmd_print_config(args) -> int:
    try:
        cfg = _load_config(args.config)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(format_config(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eev", description=__doc__.splitlines()[0], allow_abbrev=False)
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="integrate an ensemble and write diagnostics", allow_abbrev=False)
    p.add_argument("--config", default=None, help="INI config file (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("hardy-verify", help="check the Hardy-type inequalities", allow_abbrev=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--reynolds", type=float, default=None, help="also print 0.27064/Re for this Re")
    p.add_argument("--csv", default=None, help="write the check table here instead of stdout")
    p.add_argument("--sharp", action="store_true", help="repeat the extremal sweep with the sharp constant")
    p.set_defaults(func=cmd_hardy_verify)

    p = sub.add_parser("report", help="rebuild the bound report of a finished run", allow_abbrev=False)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("print-config", help="print the resolved configuration", allow_abbrev=False)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_print_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
