"""Command-line experiment driver.

Subcommands::

    hetfed run --config base.json [--config overlay.json] [--set k=v]... --out DIR
    hetfed sweep --config base.json --grid grid.json --out DIR [--jobs N]
    hetfed summarize --runs DIR [--runs DIR]... --format csv [--out FILE]

Exit codes: 0 all cells succeeded, 1 any run failure, 2 configuration error.
The environment variable HETFED_SEED supplies a seed when no config file
or override sets one.
"""

import argparse
import json
import sys

from . import harness
from .config import load_config, parse_config
from .errors import ConfigError, IngestError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment")
    run.add_argument("--config", action="append", default=[], metavar="FILE",
                     help="config file; repeat to layer overlays")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     dest="overrides", help="override a dotted config key")
    run.add_argument("--noise-rate", type=float, default=None,
                     help="shorthand for --set data.noise.rate=X")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--jobs", type=int, default=1, help="client worker threads")

    sweep = sub.add_parser("sweep", help="run a grid of experiments")
    sweep.add_argument("--config", action="append", default=[], metavar="FILE")
    sweep.add_argument("--set", action="append", default=[], dest="overrides")
    sweep.add_argument("--grid", required=True, help="JSON file of axis lists")
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--jobs", type=int, default=1, help="concurrent cells")

    summ = sub.add_parser("summarize", help="tabulate finished runs")
    summ.add_argument("--runs", action="append", required=True, metavar="DIR",
                      help="run directory or a directory of runs")
    summ.add_argument("--format", choices=["csv"], default="csv")
    summ.add_argument("--out", default=None, help="output file (default: <runs>/summary.csv)")
    summ.add_argument("--which", choices=["final", "best", "both"], default="final")
    return parser


def _cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("at least one --config file is required")
    overrides = list(args.overrides)
    if args.noise_rate is not None:
        overrides.append(f"data.noise.rate={args.noise_rate}")
    cfg = load_config(args.config, overrides)
    run_dir = harness.execute_run(cfg, args.out, jobs=max(1, args.jobs))
    print(run_dir)
    return 0


def _cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigError("at least one --config file is required")
    resolved = parse_config(args.config, args.overrides)
    try:
        with open(args.grid) as fh:
            grid = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"grid file not found: {args.grid}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file {args.grid} is not valid JSON: {exc}") from None
    outcome = harness.run_sweep(resolved, grid, args.out, jobs=max(1, args.jobs))
    for run_dir in outcome.run_dirs:
        print(run_dir)
    if outcome.failures:
        for label, error in sorted(outcome.failures.items()):
            print(f"FAILED {label}: {error}", file=sys.stderr)
        return 1
    return 0


def _cmd_summarize(args) -> int:
    run_dirs = harness.discover_runs(args.runs)
    out_path = args.out or (str(args.runs[0]).rstrip("/") + "/summary.csv")
    harness.summarize(run_dirs, out_path, which=args.which)
    print(out_path)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "sweep": _cmd_sweep, "summarize": _cmd_summarize}
    try:
        return handlers[args.command](args)
    except (ConfigError, IngestError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # run failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
