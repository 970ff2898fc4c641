#!/usr/bin/env python3
"""
Command-line entry point.

Usage:
    sicmac run --config experiment.json --out results.csv
    sicmac run --mode min_energy --target-mbps 300 --trials 5 --jobs 4
    sicmac timeshare-demo
    sicmac verify --seeds 5

Settings come from a JSON config (``--config``, $SICMAC_CONFIG or ./config.json)
and any ``--field-name`` override; see ``sicmac.config``.

Exit codes: 0 success, 1 failed rows or checks, 2 configuration errors.
"""

import argparse
import logging
import sys
from pathlib import Path

from sicmac.config import add_override_arguments, build_experiment, load_config, overrides_from_args
from sicmac.errors import ConfigError, SimulationError
from sicmac.harness import dump_allocations, emit_csv, reference_schedule, run_experiment, write_trace_csv
from sicmac.notify import send_ntfy
from sicmac.verify import CHECKS, run_checks

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

logger = logging.getLogger(__name__)


class EmojiFormatter(logging.Formatter):
    """Logging formatter that prepends emoji prefixes by level."""

    LEVEL_EMOJI = {
        logging.DEBUG: "🔍",
        logging.INFO: "✅",
        logging.WARNING: "⚠️ ",
        logging.ERROR: "❌",
        logging.CRITICAL: "🔥",
    }

    def format(self, record: logging.LogRecord) -> str:
        emoji = self.LEVEL_EMOJI.get(record.levelno, "")
        message = super().format(record)
        return f"{emoji} {message}"


def setup_logging(*, debug: bool = False, quiet: bool = False) -> None:
    """Configure root logging with emoji-formatted console output."""
    if debug:
        level = logging.DEBUG
    elif quiet:
        level = logging.WARNING
    else:
        level = logging.INFO

    handler = logging.StreamHandler()
    handler.setFormatter(EmojiFormatter("%(message)s"))
    logging.root.handlers = [handler]
    logging.root.setLevel(level)


def _notify_failure(ntfy_config: dict, title: str, message: str) -> None:
    send_ntfy(
        ntfy_config,
        title=title,
        message=message,
        priority=int(ntfy_config.get("failure_priority", 4)),
        tags=["warning"],
        rate_limit_key="run_failed",
    )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        overrides = overrides_from_args(args)
        if args.trace:
            overrides["solver"]["trace"] = True
        spec, ntfy_config = build_experiment(config, overrides)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG

    try:
        table = run_experiment(spec, jobs=args.jobs)
    except SimulationError as e:
        logger.error("Experiment aborted: %s", e)
        _notify_failure(ntfy_config, "sicmac run failed", str(e))
        return EXIT_FAILED

    out = emit_csv(table, args.out)
    logger.info("Wrote %d row(s) to %s", len(table.rows), out)
    if args.dump_alloc:
        dump_path = dump_allocations(table, out.with_name(out.name + ".alloc.npz"))
        logger.info("Wrote allocations to %s", dump_path)
    if args.trace:
        trace_path = write_trace_csv(table, args.trace)
        logger.info("Wrote solver trace to %s", trace_path)

    summary = table.summary()
    if not summary.empty:
        logger.info("Summary:\n%s", summary.to_string(index=False, float_format=lambda v: f"{v:.4g}"))

    failed = table.failed()
    for row in failed:
        logger.warning("Failed row %s: %s %s", row.key, row.status, row.error)

    if failed:
        _notify_failure(
            ntfy_config,
            "sicmac run finished with failures",
            f"{len(failed)} of {len(table.rows)} row(s) failed; results in {out}",
        )
        return EXIT_FAILED

    if ntfy_config.get("notify_on_finish", True):
        send_ntfy(
            ntfy_config,
            title="sicmac run finished",
            message=f"{spec.mode}: {len(table.rows)} row(s) written to {out}",
            tags=["white_check_mark"],
            rate_limit_key="run_finished",
        )
    return EXIT_OK


def cmd_timeshare_demo(args: argparse.Namespace) -> int:
    try:
        schedule = reference_schedule()
    except SimulationError as e:
        logger.error("Time-sharing LP failed: %s", e)
        return EXIT_FAILED
    frame = schedule.to_frame()
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    rates = ", ".join(f"{r:.2f}" for r in schedule.average_rates())
    print(f"\nTime-averaged rates (Mbps): {rates}")
    if args.out:
        path = schedule.to_csv(args.out)
        logger.info("Wrote schedule to %s", path)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    names = args.check or None
    results = run_checks(range(args.first_seed, args.first_seed + args.seeds), names)
    failed = [r for r in results if not r.passed]
    if failed:
        logger.error("%d of %d check(s) failed", len(failed), len(results))
        return EXIT_FAILED
    logger.info("All %d check(s) passed", len(results))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sicmac", description="Power allocation, SIC ordering and time sharing for multi-carrier uplinks"
    )
    parser.add_argument("--quiet", "-q", action="store_true", help="Reduce logging output")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment and write a results CSV")
    run.add_argument("--config", help="JSON config file (default: $SICMAC_CONFIG or ./config.json)")
    run.add_argument("--out", type=Path, default=Path("results.csv"), help="Results CSV path (default: results.csv)")
    run.add_argument("--dump-alloc", action="store_true", help="Also write <out>.alloc.npz with every allocation")
    run.add_argument("--jobs", type=int, default=1, help="Worker threads (default: 1)")
    run.add_argument("--trace", type=Path, metavar="PATH", help="Write per-iteration solver traces to PATH")
    add_override_arguments(run, skip=frozenset({"solver.trace"}))
    run.set_defaults(func=cmd_run)

    demo = sub.add_parser("timeshare-demo", help="Solve the built-in three-user time-sharing example")
    demo.add_argument("--out", type=Path, help="Also write the schedule as CSV")
    demo.set_defaults(func=cmd_timeshare_demo)

    verify = sub.add_parser("verify", help="Run the rate and ordering invariant checks on random scenarios")
    verify.add_argument("--seeds", type=int, default=3, help="Number of random scenarios (default: 3)")
    verify.add_argument("--first-seed", type=int, default=0, help="First scenario seed (default: 0)")
    verify.add_argument("--check", action="append", choices=sorted(CHECKS), help="Run only this check (repeatable)")
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(debug=args.debug, quiet=args.quiet)
    return args.func(args)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\n👋 Interrupted")
        sys.exit(130)
    except Exception as e:
        logger.exception("Unexpected error: %s", e)
        sys.exit(1)
