#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Command line entry point: `vnetsim run|compare|summary|merkle|simulate|options`."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import pandas as pd
import yaml

from .config import ScenarioFormatter, SimScenario
from .experiments import (
    ExperimentPlan,
    MerkleParams,
    builtin_plan_ids,
    compare_with_closed_form,
    emit_summary,
    load_plan,
    load_results,
    render_summary,
    run_merkle,
    run_plan,
    write_results,
)
from .models import ScenarioError
from .runner import run

logger = logging.getLogger(__name__)


def _parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected name=value, got {text!r}")
    name, raw = text.split("=", 1)
    return name.strip(), yaml.safe_load(raw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vnetsim", description=__doc__)
    parser.add_argument("--log-level", default="WARNING", help="Root logger level")
    sub = parser.add_subparsers(dest="command", required=True)

    run_cmd = sub.add_parser("run", help="Run experiment plans and write one CSV per plan")
    run_cmd.add_argument(
        "--plan",
        action="append",
        default=[],
        help=f"Plan id or file; built-in: {builtin_plan_ids()}",
    )
    run_cmd.add_argument("--all", action="store_true", help="Run every built-in plan")
    run_cmd.add_argument("--seed", type=int, default=0)
    run_cmd.add_argument("--out", default="results")
    run_cmd.add_argument("--full", action="store_true", help="Full-scale event counts")
    run_cmd.add_argument("--workers", type=int, default=1)

    compare = sub.add_parser("compare", help="Closed-form predictions against a result CSV")
    compare.add_argument("results", help="CSV written by `run`")
    compare.add_argument("--out", default=None, help="Write the comparison CSV here")

    summary = sub.add_parser("summary", help="Acceptance verdicts over a result directory")
    summary.add_argument("--out", default="results", help="Directory written by `run`")

    merkle = sub.add_parser("merkle", help="Merkle against flat comparison counts")
    merkle.add_argument("--objects", type=int, default=200)
    merkle.add_argument("--components-per-object", type=int, default=5)
    merkle.add_argument("--files-per-component", type=int, default=5)
    merkle.add_argument("--seed", type=int, default=0)
    merkle.add_argument("--out", default=None, help="Write the CSV here instead of stdout")

    simulate = sub.add_parser("simulate", help="Run a single scenario and print its metrics")
    simulate.add_argument("--scenario", default=None, help="Scenario YAML file")
    simulate.add_argument(
        "--set", dest="overrides", type=_parse_override, action="append", default=[]
    )

    sub.add_parser("options", help="Print the flat scenario options")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    names = builtin_plan_ids() if args.all else args.plan
    if not names:
        logger.error("Nothing to run: pass --plan or --all")
        return 2

    for name in names:
        plan = load_plan(name)
        frame = run_plan(plan, base_seed=args.seed, workers=args.workers, full=args.full)
        target = write_results(frame, args.out, plan.id)
        print(f"{plan.id}: {len(frame)} rows -> {target}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    report = compare_with_closed_form(pd.read_csv(args.results))
    if args.out:
        report.to_csv(args.out, index=False)
    print(report.to_string(index=False))
    return 0


def _cmd_summary(args: argparse.Namespace) -> int:
    criteria, code = emit_summary(load_results(args.out))
    print(render_summary(criteria))
    return code


def _cmd_merkle(args: argparse.Namespace) -> int:
    plan = ExperimentPlan(
        id="E-merkle",
        kind="merkle",
        merkle=MerkleParams(
            objects=args.objects,
            components_per_object=args.components_per_object,
            files_per_component=args.files_per_component,
        ),
    )
    frame = run_merkle(plan, base_seed=args.seed)
    columns = ["changed_files", "merkle_comparisons", "flat_comparisons"]
    frame = frame[frame["check"] == "sweep"][columns]
    if args.out:
        frame.to_csv(args.out, index=False)
    else:
        frame.to_csv(sys.stdout, index=False)
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    scenario = SimScenario.from_yaml(args.scenario) if args.scenario else SimScenario()
    scenario = ScenarioFormatter.apply(scenario, dict(args.overrides))
    metrics = run(scenario)
    print(json.dumps(metrics.summary(), indent=2, default=str))
    if metrics.violations:
        print(json.dumps({"violations": metrics.violations}, indent=2))
    return 1 if metrics.violations else 0


def _cmd_options(_: argparse.Namespace) -> int:
    print(yaml.safe_dump(ScenarioFormatter.describe(), sort_keys=True))
    return 0


COMMANDS = {
    "run": _cmd_run,
    "compare": _cmd_compare,
    "summary": _cmd_summary,
    "merkle": _cmd_merkle,
    "simulate": _cmd_simulate,
    "options": _cmd_options,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )

    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
