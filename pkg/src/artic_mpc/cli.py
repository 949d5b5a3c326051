"""Command-line entry point ``artic-mpc``.

Subcommands::

    run      simulate one framework and write log.csv, metrics.txt, trajectory.csv
    metrics  recompute the summary table of a log
    compare  side-by-side timing and error tables of two logs
    selftest run the oracle suites
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .simharness import (FRAMEWORKS, RunConfig, SimLog, SimulationError, compare_table,
                         compute_metrics, load_config, run_closed_loop,
                         write_run_outputs)
from .trajectory import ConfigurationError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors become exceptions, not ``sys.exit``."""

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="artic-mpc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="simulate one closed-loop run")
    run.add_argument("--framework", choices=FRAMEWORKS)
    run.add_argument("--config", type=Path, help="flat key = value configuration file")
    run.add_argument("--seed", type=int)
    run.add_argument("--laps", type=float)
    run.add_argument("--out", type=Path, required=True, help="output directory")

    met = sub.add_parser("metrics", help="summarise a simulation log")
    met.add_argument("--log", type=Path, required=True)
    met.add_argument("--warmup", type=float, default=5.0, help="seconds excluded (default 5)")

    cmp_ = sub.add_parser("compare", help="compare two simulation logs")
    cmp_.add_argument("--log-a", type=Path, required=True)
    cmp_.add_argument("--log-b", type=Path, required=True)
    cmp_.add_argument("--warmup", type=float, default=5.0)

    st = sub.add_parser("selftest", help="run the oracle suites")
    st.add_argument("--quick", action="store_true", help="a quarter of the cases")
    return parser


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in (("framework", args.framework), ("seed", args.seed),
                                    ("laps", args.laps)) if v is not None}
    if args.laps is not None:
        overrides["duration"] = None
    cfg = replace(cfg, **overrides)
    cfg.validate()
    t0 = time.perf_counter()
    logging.getLogger(__name__).info("running %s, seed %d", cfg.framework, cfg.seed)
    simlog = run_closed_loop(cfg)
    metrics = write_run_outputs(simlog, cfg, args.out)
    print(metrics.to_text(), end="")
    print(f"\n{len(simlog)} samples in {time.perf_counter() - t0:.1f} s; outputs in {args.out}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    simlog = SimLog.from_csv(args.log)
    print(compute_metrics(simlog, warmup=args.warmup).to_text(), end="")
    return EXIT_OK


def _cmd_compare(args) -> int:
    a = compute_metrics(SimLog.from_csv(args.log_a), warmup=args.warmup)
    b = compute_metrics(SimLog.from_csv(args.log_b), warmup=args.warmup)
    print(compare_table(a, b), end="")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .oracles import run_all
    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {"run": _cmd_run, "metrics": _cmd_metrics, "compare": _cmd_compare,
            "selftest": _cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
