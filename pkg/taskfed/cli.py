"""Command-line entry point.

    taskfed run <config> [--output-dir DIR]
    taskfed sweep <config> [--seeds N]
    taskfed grad-check [--seeds N]
    taskfed oracle-check [--seed S] [--eta-lambda X]
    taskfed validate-graph <path>

Results go to stdout, structured logs to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from aws_lambda_powertools import Logger

from taskfed.checks import grad_check, oracle_check
from taskfed.config import load_config
from taskfed.exceptions import ConfigError, NonFiniteLoss, RoundFailed, TaskFedError
from taskfed.experiment import run_experiment, sweep
from taskfed.graph import load_graph, validation_report

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

logger = Logger(service="taskfed", child=True)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskfed", description="Federated multi-task LoRA fine-tuning simulator")
    parser.add_argument("--log-level", default=os.getenv("POWERTOOLS_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run every configured strategy and write reports")
    run_p.add_argument("config")
    run_p.add_argument("--output-dir")

    sweep_p = sub.add_parser("sweep", help="repeat an experiment over consecutive master seeds")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--seeds", type=int, default=10)
    sweep_p.add_argument("--output-dir")

    grad_p = sub.add_parser("grad-check", help="finite-difference check of the backward pass")
    grad_p.add_argument("--seeds", type=int, default=10)
    grad_p.add_argument("--inject-sign-flip", action="store_true", help=argparse.SUPPRESS)

    oracle_p = sub.add_parser("oracle-check", help="aggregation and Laplacian property suite")
    oracle_p.add_argument("--seed", type=int, default=0)
    oracle_p.add_argument("--eta-lambda", type=float, help="force the contraction check to use this step")

    graph_p = sub.add_parser("validate-graph", help="check a task graph file")
    graph_p.add_argument("path")
    return parser


def _config_failure(exc: ConfigError) -> int:
    print(f"error: {exc}", file=sys.stderr)
    for line in exc.diagnostics:
        print(f"  {line}", file=sys.stderr)
    return EXIT_CONFIG


def _run(args) -> int:
    cfg = load_config(args.config)
    summary = run_experiment(cfg, args.output_dir)
    finals = {kind: s["final_mean_test"] for kind, s in summary["strategies"].items()}
    print(json.dumps({"final_mean_test": finals, "comparisons": summary["comparisons"]}, indent=2, sort_keys=True))
    return EXIT_OK


def _sweep(args) -> int:
    result = sweep(load_config(args.config), args.seeds, args.output_dir)
    print(json.dumps({k: v for k, v in result.items() if k != "per_seed"}, indent=2, sort_keys=True))
    return EXIT_OK


def _grad_check(args) -> int:
    report = grad_check(args.seeds, sign_flip=args.inject_sign_flip)
    for combo in report.combos:
        print(f"{combo.head:>12} / {combo.activation:<4}  max relative error {combo.max_error:.3e}  ({combo.worst})")
    print(f"max relative error {report.max_error:.3e}")
    if not report.passed:
        worst = max(report.combos, key=lambda c: c.max_error)
        print(f"FAILED: {worst.head}/{worst.activation} at {worst.worst}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _oracle_check(args) -> int:
    results = oracle_check(seed=args.seed, eta_lambda=args.eta_lambda)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"FAILED: {failed[0].name}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _validate_graph(args) -> int:
    report = validation_report(load_graph(args.path))
    for check, passed, detail in report:
        status = "ok" if passed else ("warning" if check == "connected" else "FAIL")
        print(f"{check:<20} {status:<8} {detail}")
    hard = [passed for check, passed, _ in report if check != "connected"]
    return EXIT_OK if all(hard) else EXIT_FAILED


COMMANDS = {
    "run": _run,
    "sweep": _sweep,
    "grad-check": _grad_check,
    "oracle-check": _oracle_check,
    "validate-graph": _validate_graph,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    Logger(service="taskfed", level=args.log_level.upper(), stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _config_failure(exc)
    except (RoundFailed, NonFiniteLoss) as exc:
        if isinstance(exc, NonFiniteLoss) or isinstance(exc.__cause__, NonFiniteLoss):
            logger.exception("Training diverged")
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        logger.exception("Round failed", extra={"command": args.command})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except TaskFedError as exc:
        logger.exception("Command failed", extra={"command": args.command})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
