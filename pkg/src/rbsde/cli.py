"""Command line front end: ``rbsde run``, ``rbsde fixtures`` and ``rbsde suite``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .bsde import SolverRefusal
from .experiment import ConfigError
from .fixtures import list_fixtures
from .runner import RunResult, Table, run_config

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_SCHEMA = 2
EXIT_REFUSED = 3


def _cell(x: Any) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float) or hasattr(x, "dtype"):
        return repr(float(x))
    return str(x)


def write_table(table: Table, directory: Path) -> Path:
    path = directory / f"{table.name}.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.header)
        for row in table.rows:
            w.writerow([_cell(x) for x in row])
    return path


def write_json(obj: Any, path: Path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8", newline="\n")


def _timing(seconds: float) -> dict[str, Any]:
    return {"wall_seconds": seconds, "rbsde_threads": os.environ.get("RBSDE_THREADS", "0")}


def _write_run(result: RunResult, out: Path, seconds: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json(result.report, out / "report.json")
    for t in result.tables:
        write_table(t, out)
    write_json(_timing(seconds), out / "timing.json")


def _summary(result: RunResult) -> None:
    for p in result.report["properties"]:
        mark = "PASS" if p["passed"] else "FAIL"
        print(f"{mark} {p['name']} value={p['value']!r} tolerance={p['tolerance']!r}")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    start = time.perf_counter()
    result = run_config(config, args.seed)
    seconds = time.perf_counter() - start
    _write_run(result, Path(args.out), seconds)
    _summary(result)
    return EXIT_OK if result.passed else EXIT_FAILED


def cmd_fixtures(args: argparse.Namespace) -> int:
    for name in list_fixtures():
        print(name)
    return EXIT_OK


def cmd_suite(args: argparse.Namespace) -> int:
    from .suite import run_suite

    start = time.perf_counter()
    report, runs = run_suite(args.seed, args.fast)
    seconds = time.perf_counter() - start
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "report.json")
    for name, r in runs.items():
        d = out / "fixtures" / name
        d.mkdir(parents=True, exist_ok=True)
        write_json(r.report, d / "report.json")
        for t in r.tables:
            write_table(t, d)
    write_json(_timing(seconds), out / "timing.json")
    for name, f in report["fixtures"].items():
        print(f"{'PASS' if f['passed'] else 'FAIL'} fixture {name}")
    for p in report["properties"]:
        print(f"{'PASS' if p['passed'] else 'FAIL'} {p['group']}:{p['name']} value={p['value']!r}")
    return EXIT_OK if report["passed"] else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbsde", description="Reflected BSDE laboratory on scenario trees.")
    parser.add_argument("--version", action="version", version=f"rbsde {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment configuration")
    run.add_argument("config", help="path to a JSON configuration")
    run.add_argument("--out", default="rbsde-out", help="output directory")
    run.add_argument("--seed", type=int, default=None, help="seed for randomized checks")
    run.set_defaults(func=cmd_run)
    fx = sub.add_parser("fixtures", help="list bundled fixtures")
    fx.set_defaults(func=cmd_fixtures)
    suite = sub.add_parser("suite", help="run all fixtures and the property battery")
    suite.add_argument("--fast", action="store_true", help="smaller randomized families")
    suite.add_argument("--out", default="rbsde-suite", help="output directory")
    suite.add_argument("--seed", type=int, default=0)
    suite.set_defaults(func=cmd_suite)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SolverRefusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
