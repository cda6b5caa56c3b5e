"""Command-line driver: ``osdquant <stage> --config cfg.json --out run/``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from . import bitalloc
from .pipeline import ConfigError, Run, RunConfig, StageError
from .tensor import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("osdquant")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osdquant", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    common.add_argument("--seed", type=_seed, help="root seed, overrides the config")
    common.add_argument("--out", default="run", help="run directory (default: %(default)s)")
    common.add_argument("--metric", choices=["mse", "downsampled-mse"],
                        help="sensitivity metric, overrides the config")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "profile": "per-layer sensitivity, perceptual weights and the loss table",
        "allocate": "solve the activation bit allocation",
        "balance": "compute and fold rotation-scaling balance",
        "train": "distill the low-rank branches and merge them",
        "eval": "held-out error and compression accounting",
        "report": "run the full pipeline and write report.json / report.csv",
        "oracle": "check the allocation solver against exhaustive enumeration",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "oracle":
            p.add_argument("--instances", type=int, default=200)
            p.add_argument("--layers", type=int, default=8)
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.metric is not None:
        overrides["metric"] = args.metric
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def run_oracle(seed: int, instances: int, layers: int) -> dict:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for k in range(instances):
        p = bitalloc.random_problem(rng, layers, k / max(instances - 1, 1))
        dp, bf = bitalloc.solve_allocation(p), bitalloc.brute_force_allocation(p)
        mismatches += dp.objective != bf.objective or dp.bits != bf.bits
    return {"instances": instances, "layers": layers, "mismatches": int(mismatches)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "oracle":
            result = run_oracle(cfg.seed, args.instances, args.layers)
        else:
            run = Run(cfg, args.out)
            result = run.report() if args.command == "report" else run.stage(args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, ConfigError):
            return EXIT_CONFIG
        if isinstance(exc.cause, bitalloc.InfeasibleAllocationError):
            return EXIT_INFEASIBLE
        if isinstance(exc.cause, (NumericalError, FloatingPointError)):
            return EXIT_NUMERICAL
        raise
    if result is not None:
        json.dump(result, sys.stdout, indent=2, sort_keys=True, default=str)
        print()
    if args.command == "oracle" and result["mismatches"]:
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
