"""Command line entry point: ``irmemory <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import asymptotics, harness
from .numerics import RngStream
from .processes import SpectralModel, generate, ingest_csv, write_csv


def _cmd_estimate(args) -> int:
    column = int(args.column) if args.column.lstrip("-").isdigit() else args.column
    rep, text, js = harness.estimate_file(args.csv, p=args.p, table=args.table, column=column,
                                          skip_header=args.skip_header,
                                          diagnostics=args.diagnostics)
    print(js if args.json else text)
    return 0


def _cmd_simulate(args) -> int:
    cfg = harness.ScenarioConfig.load(args.scenario)
    try:
        summary = harness.run_scenario(cfg, table=args.table, workers=args.workers)
    except harness.BatchFailure as exc:
        print(f"batch failed: {exc}", file=sys.stderr)
        return 2
    print(summary.cells_csv(), end="")
    return 0


def _cmd_build_table(args) -> int:
    lo, hi, step = args.grid
    if abs(lo - asymptotics.GAMMA_D_MIN) > 1e-12 or abs(hi - asymptotics.GAMMA_D_MAX) > 1e-12:
        print("only the [-0.49, 0.49] range is supported; the grid step is free", file=sys.stderr)
        return 1
    spec = asymptotics.McSpec(mc_samples=args.mc_samples, n_scrambles=args.scrambles,
                              tau_max=args.tau_max, tau_step=args.tau_step, seed=args.seed)

    def progress(k, n, d):
        print(f"[{k}/{n}] d={d:+.2f}", file=sys.stderr, flush=True)

    table = asymptotics.build_table(args.p, step, spec, progress)
    asymptotics.save_table(table, args.out)
    print(f"wrote {args.out} (p={table.p}, {table.gamma_d_grid.size} grid points, "
          f"flagged={table.flagged})")
    return 0


def _cmd_refine_table(args) -> int:
    table = asymptotics.load_table(args.table)
    spec = asymptotics.McSpec(mc_samples=args.mc_samples, n_scrambles=table.mc.n_scrambles,
                              tau_max=table.mc.tau_max, tau_step=table.mc.tau_step, seed=table.mc.seed)
    todo = asymptotics.non_pd_points(table)
    print(f"{todo.size} grid points are not positive definite", file=sys.stderr)

    def progress(k, n, d):
        print(f"[{k}/{n}] d={d:+.2f}", file=sys.stderr, flush=True)

    table = asymptotics.refine_table(table, spec, todo, progress)
    asymptotics.save_table(table, args.out or args.table)
    left = asymptotics.non_pd_points(table)
    print(f"wrote {args.out or args.table}; {left.size} grid points still not positive definite"
          + (f" (d = {', '.join(f'{d:+.2f}' for d in table.gamma_d_grid[left])})" if left.size else ""))
    return 0


def _cmd_validate(args) -> int:
    checks = harness.validate_asymptotics()
    print(harness.format_checks(checks))
    return 0 if all(c.passed for c in checks) else 1


def _cmd_generate(args) -> int:
    spec = json.loads(args.model)
    model = SpectralModel.from_dict(spec)
    ts = generate(model, args.n, RngStream(args.seed, args.stream))
    write_csv(ts, args.out)
    print(f"wrote {args.n} values to {args.out}")
    return 0


def _cmd_density(args) -> int:
    column = int(args.column) if args.column.lstrip("-").isdigit() else args.column
    ts = ingest_csv(args.csv, column=column)
    out = harness.export_density(ts.values, args.overlay)
    text = out.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="irmemory",
                                 description="Memory parameter estimation by multiscale increment ratios.")
    sub = ap.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate d for a CSV column")
    e.add_argument("csv")
    e.add_argument("--p", type=int, default=None, help="number of scales (default [1.5 log N])")
    e.add_argument("--table", default=None, help="asymptotic table (default: shipped or $IRMEMORY_TABLE)")
    e.add_argument("--column", default="0", help="column index or header name")
    e.add_argument("--skip-header", action="store_true")
    e.add_argument("--diagnostics", action="store_true", help="include every grid point")
    e.add_argument("--json", action="store_true", help="machine-readable output")
    e.set_defaults(func=_cmd_estimate)

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario file")
    s.add_argument("scenario")
    s.add_argument("--table", default=None)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=_cmd_simulate)

    b = sub.add_parser("build-table", help="compute and store the asymptotic covariance table")
    b.add_argument("--p", type=int, default=20)
    b.add_argument("--grid", type=float, nargs=3, metavar=("LO", "HI", "STEP"),
                   default=(asymptotics.GAMMA_D_MIN, asymptotics.GAMMA_D_MAX, 0.01))
    b.add_argument("--mc-samples", type=int, default=asymptotics.McSpec.mc_samples)
    b.add_argument("--scrambles", type=int, default=asymptotics.McSpec.n_scrambles)
    b.add_argument("--tau-max", type=float, default=asymptotics.McSpec.tau_max)
    b.add_argument("--tau-step", type=float, default=asymptotics.McSpec.tau_step)
    b.add_argument("--seed", type=int, default=asymptotics.McSpec.seed)
    b.add_argument("--out", default=str(asymptotics.DEFAULT_TABLE_PATH))
    b.set_defaults(func=_cmd_build_table)

    r = sub.add_parser("refine-table", help="recompute non-positive-definite grid points with more samples")
    r.add_argument("--table", default=str(asymptotics.DEFAULT_TABLE_PATH))
    r.add_argument("--mc-samples", type=int, default=4 * asymptotics.McSpec.mc_samples)
    r.add_argument("--out", default=None, help="output path (default: overwrite --table)")
    r.set_defaults(func=_cmd_refine_table)

    v = sub.add_parser("validate", help="run the expansion and consistency self-checks")
    v.set_defaults(func=_cmd_validate)

    g = sub.add_parser("generate", help="simulate one path to CSV")
    g.add_argument("--model", required=True, help='JSON model, e.g. \'{"kind": "fgn", "H": 0.7}\'')
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--stream", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    k = sub.add_parser("density", help="export KDE plot data for a CSV column")
    k.add_argument("csv")
    k.add_argument("--column", default="0")
    k.add_argument("--overlay", default="normal:0,1", help="normal:MU,SD or chi2:K")
    k.add_argument("--out", default=None)
    k.set_defaults(func=_cmd_density)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
