"""Command-line entry point: ``tiltdiff KIND [--config PATH] [--set section.key=value ...]``.

Exit status is 0 on success, 1 for configuration errors and 2 for runtime
faults.  Every run writes ``resolved_config.ini`` and ``summary.json`` into
the output directory.
"""

import argparse
import json
import logging
import os
import sys
import time
import traceback

from threadpoolctl import threadpool_limits

from . import __version__
from .config import FORMAT_VERSION, KINDS, load_config
from .errors import ConfigError
from .experiments import run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="tiltdiff", description="Reward-tilted diffusion toy experiments.")
    parser.add_argument("kind", choices=KINDS, help="experiment to run")
    parser.add_argument("--config", metavar="PATH", help="INI file with overrides of the defaults")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one value (repeatable)")
    parser.add_argument("--seed", type=int, help="seed for all random streams")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def _error_record(exc):
    record = {"type": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "stage", "step", "chain", "interval"):
        value = getattr(exc, attr, None)
        if value is not None:
            record[attr] = value
    return record


def _write_summary(out, summary):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = [f"experiment.kind={args.kind}"] + list(args.overrides)
    try:
        config = load_config(args.config, overrides, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        if args.out:
            _write_summary(args.out, {"format_version": FORMAT_VERSION, "status": "config-error", "error": _error_record(exc)})
        return EXIT_CONFIG

    out = config["experiment.out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.ini"), "w") as fh:
        fh.write(config.to_ini())
    summary = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "kind": config.kind,
        "seed": config.seed,
        "config_hash": config.digest(),
    }
    start = time.perf_counter()
    status = EXIT_OK
    try:
        with threadpool_limits(limits=1):
            ctx, results = run_experiment(config, figures=not args.no_figures)
        summary.update(status="ok", results=results, files=sorted(os.path.relpath(f, out) for f in ctx.files))
    except ConfigError as exc:
        summary.update(status="config-error", error=_error_record(exc))
        print(f"config error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 -- every fault becomes a structured record
        summary.update(status="fault", error=_error_record(exc))
        print(f"runtime fault: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        status = EXIT_FAULT
    summary["wall_clock_seconds"] = time.perf_counter() - start
    _write_summary(out, summary)
    return status


if __name__ == "__main__":
    sys.exit(main())
