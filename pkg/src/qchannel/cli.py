"""Command-line entry point: ``qchannel <command> --scenario FILE --seed N --out DIR``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_INVALID, EXIT_ORCHESTRATION = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qchannel", description="Entanglement distribution channel simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("scan", "fig3", "qkd", "orchestrate", "probe-order"):
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="scenario YAML file")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the scenario)")
        p.add_argument("--out", required=True, help="output directory for CSV files")
        p.add_argument("--figures", action="store_true", help="also render PNG figures next to the CSVs")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "scan":
            p.add_argument("--state", choices=("psi", "phi"), default="psi")
    return parser


def _print_report(report) -> None:
    for path in report.outputs:
        print(f"wrote {path}")
    for k in sorted(report.metrics):
        print(f"  {k} = {report.metrics[k]}")
    print(f"  wall_time_s = {report.wall_time:.3f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        scenario = load_scenario(args.scenario, args.seed)
    except ScenarioError as exc:
        for problem in exc.problems:
            print(problem, file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "scan":
            report = experiments.cmd_scan(scenario, args.state, args.out)
        else:
            report = experiments.COMMANDS[args.command](scenario, args.out)
    except experiments.OrchestrationFailed as exc:
        print(f"orchestration failed: {exc}", file=sys.stderr)
        _print_report(exc.report)
        return EXIT_ORCHESTRATION
    except (ValueError, KeyError) as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.figures:
        from .plotting import render

        report.outputs.extend(render(report, args.out))
    _print_report(report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
