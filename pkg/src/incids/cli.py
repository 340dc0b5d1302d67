"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 a scenario
expectation failed.  Errors are printed to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, IncidsError, ScenarioError, SnapshotError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SCENARIO = 0, 2, 3, 4

COMMANDS = {
    "synth": pipeline.cmd_synth,
    "prepare": pipeline.cmd_prepare,
    "train": pipeline.cmd_train,
    "scenario-holdout": pipeline.cmd_scenario_holdout,
    "scenario-false-alarm": pipeline.cmd_scenario_false_alarm,
    "compare-offline": pipeline.cmd_compare_offline,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="incids", description="Incremental intrusion detection pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["report"]:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="INI file with a [run] section")
        s.add_argument("--state-dir", help="override the engine state directory")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--json", action="store_true", help="print the report JSON to stdout")
        if name == "report":
            s.add_argument("name", choices=list(COMMANDS), help="which stored report to render")
    d = sub.add_parser("defaults", help="print a full default config")
    d.add_argument("--json", action="store_true")
    return p


def _fail(code: int, exc: Exception) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc).replace("\n", " "), "exit": code}),
          file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "defaults":
            cfg = RunConfig()
            if args.json:
                print(json.dumps({k: v for k, v in vars(cfg).items() if k != "base_dir"}, indent=2))
            else:
                sys.stdout.write(cfg.to_ini())
            return EXIT_OK
        cfg = load_config(args.config, seed=args.seed, state_dir=args.state_dir)
        if args.command == "report":
            path = cfg.reports / f"{args.name}.json"
            if not path.exists():
                raise DataError(f"no stored report for {args.name}")
            report = json.loads(path.read_text())
            sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n" if args.json
                             else pipeline.render_report(report))
            return EXIT_OK
        try:
            path = COMMANDS[args.command](cfg)
        except ScenarioError:
            # The report is still written; show it before failing.
            if args.json:
                _echo(cfg, args.command)
            raise
        if args.json:
            _echo(cfg, args.command)
        else:
            print(path)
        return EXIT_OK
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except ScenarioError as exc:
        return _fail(EXIT_SCENARIO, exc)
    except (DataError, SnapshotError, IncidsError, OSError) as exc:
        return _fail(EXIT_DATA, exc)


def _echo(cfg: RunConfig, name: str) -> None:
    path = cfg.reports / f"{name}.json"
    if Path(path).exists():
        sys.stdout.write(path.read_text())


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
