"""``adsgd`` command line: run, sweep, plotdata, verify, presets."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError
from .experiments import (
    FIGURES,
    OUT_ENV,
    PRESETS,
    MissingRunsError,
    OutputExistsError,
    RunFailure,
    emit_plotdata,
    load_spec,
    output_root,
    preset,
    run_experiment,
)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_EXISTS, EXIT_RUN_FAILED = 0, 1, 2, 3, 4


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, metavar="PATH", help="JSON config file or preset name (fig2, fig3, fig4)")
    p.add_argument("--seed-offset", type=int, default=0, metavar="N", help="added to every seed in the config")
    p.add_argument("--workers", type=int, default=1, metavar="N", help="parallel worker processes")
    p.add_argument("--force", action="store_true", help="overwrite an existing experiment directory")
    p.add_argument("--out", metavar="DIR", help=f"output root (default: ${OUT_ENV} or ./adsgd-results)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adsgd", description="Asynchronous decentralized SGD over wireless links.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the config's base point (sweep ignored) for every seed")
    _add_run_flags(p)
    p = sub.add_parser("sweep", help="run the full sweep grid for every seed")
    _add_run_flags(p)
    p = sub.add_parser("verify", help="run the experiment and check the consensus and stationarity bounds")
    _add_run_flags(p)

    p = sub.add_parser("plotdata", help="write a plot-ready CSV from a finished experiment")
    p.add_argument("experiment", help="experiment directory, or its name under the output root")
    p.add_argument("--figure", choices=FIGURES, help="figure layout (default: the experiment name)")
    p.add_argument("--out", metavar="DIR", help="output root used to resolve a bare experiment name")

    p = sub.add_parser("presets", help="list built-in presets, or print one as JSON")
    p.add_argument("name", nargs="?", choices=sorted(PRESETS))
    return parser


def _execute(args, sweep: bool, bounds: bool | None) -> int:
    if args.workers < 1:
        _log("--workers must be at least 1")
        return EXIT_USAGE
    try:
        spec = load_spec(args.config)
    except (ConfigError, KeyError) as exc:
        _log(str(exc))
        return EXIT_USAGE
    if not sweep and spec.sweep:
        spec = spec.at({})
    try:
        outcome = run_experiment(spec, args.out, args.force, args.workers, args.seed_offset, bounds=bounds, log=_log)
    except OutputExistsError as exc:
        _log(str(exc))
        return EXIT_EXISTS
    except RunFailure as exc:
        _log(str(exc))
        return EXIT_RUN_FAILED
    print(outcome.path)
    if outcome.bound_report is not None:
        return _print_report(outcome.bound_report)
    return EXIT_OK


def _print_report(report: dict) -> int:
    for entry in report["points"]:
        label = json.dumps(entry["point"], sort_keys=True) if entry["point"] else "base"
        cons, stat = entry["consensus"], entry["stationarity"]
        if "skipped" in cons:
            print(f"{label} consensus: skipped ({cons['skipped']})")
        else:
            print(f"{label} consensus: {'PASS' if cons['holds'] else 'FAIL'} mean={cons['empirical_mean']:.4g} bound={cons['bound']:.4g} margin={cons['margin']:.4g}")
        if "skipped" in stat:
            print(f"{label} stationarity: skipped ({stat['skipped']})")
        else:
            print(f"{label} stationarity: {'PASS' if stat['holds'] else 'FAIL'} mean={stat['empirical_mean']:.4g} bound={stat['bound']:.4g} margin={stat['margin']:.4g}")
        if entry["staleness_assumption_violated"]:
            print(f"{label} warning: fitted staleness constant exceeds 1")
    return EXIT_OK if report["holds"] else EXIT_CHECK_FAILED


def _plotdata(args) -> int:
    path = Path(args.experiment)
    if not path.is_dir():
        path = output_root(args.out) / args.experiment
    figure = args.figure or path.name
    if figure not in FIGURES:
        _log(f"cannot infer the figure from {path.name!r}; pass --figure")
        return EXIT_USAGE
    try:
        print(emit_plotdata(path, figure))
    except (MissingRunsError, ValueError) as exc:
        _log(str(exc))
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _presets(args) -> int:
    if args.name:
        print(preset(args.name).model_dump_json(indent=2))
        return EXIT_OK
    for name, (make, desc) in PRESETS.items():
        spec = make()
        print(f"{name}\t{spec.run_count()} runs\t{desc}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _execute(args, sweep=False, bounds=None)
    if args.command == "sweep":
        return _execute(args, sweep=True, bounds=None)
    if args.command == "verify":
        return _execute(args, sweep=True, bounds=True)
    if args.command == "plotdata":
        return _plotdata(args)
    return _presets(args)


if __name__ == "__main__":
    raise SystemExit(main())
