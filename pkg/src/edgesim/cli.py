"""Command line entry point: ``edgesim run | scaffold | verify``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .catalog import CATALOG, UnknownScenario, scaffold
from .scenario import ConfigError, apply_overrides, load_config, run_scenario, verify_artifacts, write_artifacts
from .simnet import ScenarioError, SimulationError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgesim", description=__doc__)
    parser.add_argument("--version", action="version", version=f"edgesim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its artifacts")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=_u64, default=None)
    run.add_argument("--out", type=Path, default=None,
                     help="results directory (default: $EDGESIM_OUT or ./results)")
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted-path override, e.g. ordering.f=2 (repeatable)")

    sc = sub.add_parser("scaffold", help="write a built-in scenario config")
    sc.add_argument("name", help=f"one of: {', '.join(CATALOG)}")
    sc.add_argument("-o", "--output", type=Path, default=None, help="file to write (default: stdout)")

    ver = sub.add_parser("verify", help="re-validate a results directory offline")
    ver.add_argument("directory", type=Path)
    return parser


def cmd_run(args) -> int:
    try:
        data = json.loads(args.config.read_text())
    except (OSError, ValueError) as exc:
        print(f"config: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        data = apply_overrides(data, args.overrides)
        if args.seed is not None:
            data["seed"] = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs: must be >= 1")
        cfg = load_config(data)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path(os.environ.get("EDGESIM_OUT", "results"))
    try:
        result = run_scenario(cfg, jobs=args.jobs)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    write_artifacts(result, out)
    sys.stdout.write(result.summary_csv)
    if not result.ok:
        for line in result.violations():
            print(f"invariant violated: {line}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_scaffold(args) -> int:
    try:
        cfg = scaffold(args.name)
    except UnknownScenario as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    text = json.dumps(cfg, indent=2) + "\n"
    if args.output is None:
        sys.stdout.write(text)
    else:
        args.output.write_text(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    if not (args.directory / "summary.csv").exists():
        print(f"{args.directory}: not a results directory", file=sys.stderr)
        return EXIT_CONFIG
    problems = verify_artifacts(args.directory)
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return EXIT_INVARIANT
    print("ok")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "scaffold": cmd_scaffold, "verify": cmd_verify}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
