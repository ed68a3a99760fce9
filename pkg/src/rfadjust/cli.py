"""Command-line entry point: ``rfadjust {analyze, simulate, power-curve, plan}``.

Every command that writes a result file also writes
``<output>.manifest.json`` recording the command line, the resolved
configuration, the seed, the tool version, timestamps and SHA-256 digests of
inputs and outputs.  Exit codes: 0 success, 1 internal error, 2 user error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import forest as rf
from .data import CSVParseError, DataValidationError, load_trial_csv
from .inference import (
    TEST_KINDS,
    VARIANCE_CONVENTIONS,
    InversionError,
    confidence_interval,
    rf_adjusted_test,
    sample_size_reduction,
)
from .simulation import (
    CSV_COLUMNS,
    ConfigError,
    ReplicateError,
    crossing_n,
    load_scenario_config,
    power_curve,
    run_scenario,
)

EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2


class UserError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(output: Path, command, argv, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path = output.with_name(output.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _fmt_float(x) -> str:
    return repr(float(x))


def _rows_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt_float(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def _progress(label):
    def report(done, total):
        print(f"{label}: {done}/{total} replicates", file=sys.stderr, flush=True)
    return report


# -- analyze ----------------------------------------------------------------

def _forest_from_args(args) -> rf.ForestConfig:
    try:
        return rf.ForestConfig(n_trees=args.n_trees, mtry=args.mtry, min_leaf=args.min_leaf,
                               max_depth=args.max_depth, seed=args.seed)
    except ValueError as exc:
        raise UserError(str(exc)) from None


def cmd_analyze(args, argv) -> int:
    started = _now()
    if not 0 < args.ci_level < 1:
        raise UserError(f"--ci-level must be in (0, 1), got {args.ci_level}")
    if not math.isfinite(args.tau0):
        raise UserError("--tau0 must be finite")
    data = load_trial_csv(args.csv, args.outcome, args.assignment)
    data.require_testable()
    cfg = _forest_from_args(args)
    try:
        cfg.resolve_mtry(data.p)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    ci_level = None if args.ci_method == "none" else args.ci_level
    analysis = rf_adjusted_test(
        data, args.tau0, args.test, args.sided, cfg,
        ci_level=ci_level if args.ci_method == "t-residual" else None,
        variance_convention=args.variance_convention,
        n_resamples=args.n_resamples)
    if args.ci_method == "test-inversion":
        ci = confidence_interval(data, args.ci_level, "test-inversion", args.test, cfg,
                                 args.variance_convention)
        analysis = replace(analysis, estimate=analysis.estimate.with_ci(args.ci_level, ci))
    result = analysis.to_dict()
    result["ci_method"] = args.ci_method
    output = Path(args.output)
    output.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    config = {
        "csv": str(args.csv), "outcome": args.outcome, "assignment": args.assignment,
        "test": args.test, "sided": args.sided, "tau0": args.tau0,
        "ci_method": args.ci_method, "ci_level": args.ci_level,
        "variance_convention": args.variance_convention, "n_resamples": args.n_resamples,
        "forest": asdict(cfg),
    }
    _write_manifest(output, "analyze", argv, config, args.seed, [args.csv], [output], started)
    ci = result["ci"]
    ci_txt = f", {ci_level:.0%} CI [{ci[0]:.4g}, {ci[1]:.4g}]" if ci else ""
    print(f"{result['method']} ({args.sided}): p = {result['p_value']:.4g}, "
          f"tau_hat = {result['tau_hat']:.4g}{ci_txt}")
    return EXIT_OK


# -- simulate / power-curve -------------------------------------------------

def cmd_simulate(args, argv) -> int:
    started = _now()
    config = load_scenario_config(args.config)
    result = run_scenario(config, args.workers, progress=_progress("simulate"))
    output = Path(args.output)
    output.write_text(_rows_csv(result.rows()), encoding="utf-8")
    _write_manifest(output, "simulate", argv, config.to_dict(), config.master_seed,
                    [args.config], [output], started)
    rates = ", ".join(f"{t}={r:.4f}" for t, r in result.rejection_rate.items())
    print(f"{config.n_reps} replicates: {rates}")
    return EXIT_OK


def _parse_grid(tokens) -> list[int]:
    grid = []
    for tok in tokens:
        for part in str(tok).split(","):
            part = part.strip()
            if not part:
                continue
            try:
                n = int(part)
            except ValueError:
                raise UserError(f"--n-grid: {part!r} is not an integer") from None
            if n < 4 or n % 2:
                raise UserError(f"--n-grid: N must be an even integer >= 4, got {n}")
            grid.append(n)
    if not grid:
        raise UserError("--n-grid must list at least one N")
    return sorted(set(grid))


def summary_path(output: Path) -> Path:
    return output.with_name(output.name + ".summary.txt")


def cmd_power_curve(args, argv) -> int:
    started = _now()
    template = load_scenario_config(args.config)
    grid = _parse_grid(args.n_grid)
    for n in grid:
        try:
            template.replace(N=n)
        except ConfigError as exc:
            raise UserError(f"--n-grid: N={n}: {exc}") from None
    results = power_curve(template, grid, args.workers, progress=_progress("power-curve"))
    output = Path(args.output)
    rows = [row for res in results for row in res.rows()]
    output.write_text(_rows_csv(rows), encoding="utf-8")
    cross = crossing_n(results, args.target)
    lines = [f"first N with power >= {args.target} on grid {grid}"]
    lines += [f"{t}: {n if n is not None else 'not reached'}" for t, n in cross.items()]
    summary = summary_path(output)
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    config = {**template.to_dict(), "N_grid": grid, "target": args.target}
    _write_manifest(output, "power-curve", argv, config, template.master_seed,
                    [args.config], [output, summary], started)
    print("\n".join(lines))
    return EXIT_OK


# -- plan -------------------------------------------------------------------

def cmd_plan(args, argv) -> int:
    try:
        saved = sample_size_reduction(args.N, args.gamma)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    print(f"N = {args.N}")
    print(f"gamma = {args.gamma:g}")
    print(f"savings = {saved:g}")
    print(f"adjusted requirement = {args.N - saved:g}")
    print("note: first-order planning heuristic; it ignores the cost of estimating the "
          "adjustment model, so treat the adjusted figure as optimistic.")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfadjust",
        description="Random-forest adjusted randomization tests for two-arm trials.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="adjusted test and effect estimate for a trial CSV")
    a.add_argument("csv", type=Path)
    a.add_argument("--outcome", required=True, help="outcome column name")
    a.add_argument("--assignment", required=True, help="0/1 assignment column name")
    a.add_argument("--test", choices=TEST_KINDS, default="wilcoxon")
    a.add_argument("--sided", choices=("two-sided", "greater", "less"), default="two-sided")
    a.add_argument("--tau0", type=float, default=0.0, help="null effect (default 0)")
    a.add_argument("--ci-method", choices=("t-residual", "test-inversion", "none"),
                   default="t-residual")
    a.add_argument("--ci-level", type=float, default=0.95)
    a.add_argument("--variance-convention", choices=VARIANCE_CONVENTIONS,
                   default="finite-population")
    a.add_argument("--n-resamples", type=_positive_int, default=10_000,
                   help="resamples for a sampled permutation test")
    a.add_argument("--n-trees", type=_positive_int, default=500)
    a.add_argument("--mtry", type=_positive_int, default=None, help="default max(1, p // 3)")
    a.add_argument("--min-leaf", type=_positive_int, default=5)
    a.add_argument("--max-depth", type=_positive_int, default=None)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--output", required=True, help="result JSON path")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="rejection rates for one scenario")
    s.add_argument("config", type=Path, help="YAML or JSON scenario file")
    s.add_argument("--workers", type=_positive_int, default=None,
                   help="worker processes (default: $RFADJUST_WORKERS or 1)")
    s.add_argument("--output", required=True, help="tidy CSV path")
    s.set_defaults(func=cmd_simulate)

    p = sub.add_parser("power-curve", help="rejection rates over a grid of sample sizes")
    p.add_argument("config", type=Path)
    p.add_argument("--n-grid", nargs="+", required=True,
                   help="sample sizes, e.g. --n-grid 100 150 200 or 100,150,200")
    p.add_argument("--target", type=float, default=0.8, help="power level for the summary")
    p.add_argument("--workers", type=_positive_int, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_power_curve)

    q = sub.add_parser("plan", help="sample-size savings heuristic N * gamma")
    q.add_argument("N", type=_positive_int)
    q.add_argument("gamma", type=float, help="variance fraction explained, in [0, 1)")
    q.set_defaults(func=cmd_plan)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (UserError, DataValidationError, CSVParseError, ConfigError, InversionError,
            FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        key = getattr(exc, "key", None)
        where = f" [{key}]" if key else ""
        print(f"rfadjust: error{where}: {exc}", file=sys.stderr)
        return EXIT_USER
    except ReplicateError as exc:
        print(f"rfadjust: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort handler for the exit-code contract
        print(f"rfadjust: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
