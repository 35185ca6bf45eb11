import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import config
from harness import SimulationAbort, compute_metrics, export, load_run, run_closed_loop, write_summary
from nlp import SolveMode
from planner import PlannerMode
from scenario import ScenarioError, load_scenario, with_overrides

# Exit codes
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ABORT = 3

# Configure logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(filename)s:%(lineno)d - %(message)s',
    level=getattr(logging, config.LOG_LEVEL, logging.INFO)
)

logger = logging.getLogger(__name__)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Parallel trajectory-optimization lane-change planner.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one closed-loop simulation")
    run.add_argument("--scenario", default=config.DEFAULT_SCENARIO,
                     help="Scenario file or bundled scenario name")
    run.add_argument("--planner", choices=[m.value for m in PlannerMode], default=None,
                     help="Planner variant; defaults to the scenario's")
    run.add_argument("--duration", type=_positive_float, default=None, help="Simulated time in seconds")
    run.add_argument("--out", default=config.DEFAULT_OUTPUT_DIR, help="Output directory")
    run.add_argument("--converge", action="store_true",
                     help="Iterate every SQP solve to convergence instead of real-time iterations")
    run.add_argument("--threads", type=_positive_int, default=None, help="Worker threads for the candidate solves")

    metrics = sub.add_parser("metrics", help="Recompute the summary of an exported run")
    metrics.add_argument("--log", required=True, help="Run directory written by 'run'")

    compare = sub.add_parser("compare", help="Run pto1, pto3 and pto6 on one scenario")
    compare.add_argument("--scenario", default=config.DEFAULT_SCENARIO)
    compare.add_argument("--duration", type=_positive_float, default=None)
    compare.add_argument("--out", default=config.DEFAULT_OUTPUT_DIR)
    compare.add_argument("--converge", action="store_true")
    compare.add_argument("--threads", type=_positive_int, default=None)

    return parser.parse_args(argv)


def _run_one(scenario, out_dir: str, mode: SolveMode, threads: Optional[int]):
    log = run_closed_loop(scenario, mode, threads)
    summary = compute_metrics(log)
    export(log, summary, out_dir)
    logger.info(f"{scenario.planner.mode.value}: e_mean={summary.e_mean:.3f} m/s, S_min={summary.S_min:.3f}, "
                f"P_safe={summary.P_safe:.1f}%, L_long={summary.L_long:.1f} m, "
                f"T_solve={summary.T_solve * 1000:.1f} ms, P_LC={summary.P_LC:.1f}%")
    return summary


def cmd_run(args: argparse.Namespace) -> int:
    mode = SolveMode.CONVERGE if args.converge else SolveMode.RTI
    scenario = with_overrides(load_scenario(args.scenario), args.planner, args.duration)
    summary = _run_one(scenario, args.out, mode, args.threads)
    print(json.dumps(summary.to_json_dict(), indent=2, allow_nan=False))
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    try:
        log = load_run(args.log)
    except (OSError, ValueError) as e:
        raise ScenarioError(f"cannot read run directory {args.log}: {e}", "log") from e
    if not log.records:
        raise ScenarioError(f"run directory {args.log} holds no cycles", "log")
    summary = compute_metrics(log)
    write_summary(summary, args.log)
    print(json.dumps(summary.to_json_dict(), indent=2, allow_nan=False))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    mode = SolveMode.CONVERGE if args.converge else SolveMode.RTI
    base = load_scenario(args.scenario)
    table = {}
    for planner in PlannerMode:
        scenario = with_overrides(base, planner.value, args.duration)
        summary = _run_one(scenario, os.path.join(args.out, planner.value), mode, args.threads)
        table[planner.value] = summary.to_json_dict()

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "comparison.json"), "w", encoding="utf-8") as f:
        json.dump(table, f, indent=2, allow_nan=False)
        f.write("\n")
    print(json.dumps(table, indent=2, allow_nan=False))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    handlers = {"run": cmd_run, "metrics": cmd_metrics, "compare": cmd_compare}
    try:
        return handlers[args.command](args)
    except ScenarioError as e:
        logger.error(f"Validation error: {e}")
        return EXIT_VALIDATION
    except SimulationAbort:
        logger.exception("Simulation aborted")
        return EXIT_ABORT


if __name__ == '__main__':
    sys.exit(main())
