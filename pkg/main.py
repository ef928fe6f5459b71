from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from modules.errors import ConfigError, DataError, VplineError
from modules.experiments import CommandResult, cmd_ab_degeneracy, cmd_cluster, cmd_fim, cmd_simulate, cmd_solve
from utils.config_manager import apply_overrides, experiment_config_from_dict, load_config, save_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SOLVER = 4


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Line mapping with vanishing-point factors: desk-scale experiments")
    p.add_argument("--config", help="Experiment config JSON (defaults are used for missing keys).")
    p.add_argument("--seed", type=int, help="Run a single seed instead of the configured list.")
    p.add_argument("--no-vp", action="store_true", help="Exclude vanishing-point factors.")
    p.add_argument("--vp-source", choices=["truth", "jlinkage"], help="Where vanishing-point observations come from.")
    p.add_argument("--out", help="Output directory.")
    p.add_argument("--verbose", "-v", action="store_true", help="Debug logging.")

    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="Write synthetic datasets (one JSON-lines file per seed).")
    solve = sub.add_parser("solve", help="Run the sliding-window estimator and score it against ground truth.")
    solve.add_argument("dataset", nargs="?", help="Dataset file; simulated in memory per seed when omitted.")
    sub.add_parser("ab-degeneracy", help="Paired with/without-VP solves on pure-translation sequences.")
    fim = sub.add_parser("fim", help="Per-line information ranks at ground truth.")
    fim.add_argument("dataset", help="Dataset file.")
    cluster = sub.add_parser("cluster", help="J-linkage clustering of a segments file.")
    cluster.add_argument("segments", help="JSON file with a 'segments' list and optional 'labels'.")
    return p.parse_args(argv)


def _run(args: argparse.Namespace) -> CommandResult:
    config = apply_overrides(
        load_config(args.config),
        seed=args.seed,
        no_vp=args.no_vp,
        vp_source=args.vp_source,
        out=args.out,
    )
    cfg = experiment_config_from_dict(config)

    if args.command == "simulate":
        result = cmd_simulate(cfg, config)
    elif args.command == "solve":
        result = cmd_solve(cfg, config, args.dataset)
    elif args.command == "ab-degeneracy":
        result = cmd_ab_degeneracy(cfg, config)
    elif args.command == "fim":
        result = cmd_fim(cfg, config, args.dataset)
    else:
        result = cmd_cluster(cfg, config, args.segments)
    # the resolved config reruns the command with --config
    saved = save_config(config, Path(cfg.output_dir) / "config.json")
    return replace(result, outputs=[*result.outputs, str(saved)])


def main(argv: Optional[List[str]] = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        result = _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VplineError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    for line in result.details:
        print(line)
    for path in result.outputs:
        print(f"wrote {path}")
    return EXIT_OK if result.errors == 0 else EXIT_SOLVER


if __name__ == "__main__":
    raise SystemExit(main())
