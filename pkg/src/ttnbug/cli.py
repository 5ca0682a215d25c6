"""
Command line: ``ttnbug run {convergence,ranktrace,planesource,robustness} CONFIG``.
"""

import argparse
import json
import sys

from .harness import RUNNERS, load_config
from .tensor_core import DivergenceError
from .ttn_integrator import RankGrowthError


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def build_parser():
    parser = argparse.ArgumentParser(prog="ttnbug", description="Parallel BUG experiments for tree tensor networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("experiment", choices=sorted(RUNNERS))
    run.add_argument("config", help="JSON config file")
    run.add_argument("--theta", type=float, help="truncation tolerance")
    run.add_argument("--h", type=_floats, help="step size(s), comma separated")
    run.add_argument("--tmax", type=float, help="final time")
    run.add_argument("--model", choices=["ising", "planesource", "synthetic-matrix", "synthetic-tucker"])
    run.add_argument("--mode", choices=["parallel", "rank_adaptive", "both"])
    run.add_argument("--output", help="output directory for CSV files")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        overrides = {"theta": args.theta, "h": args.h, "T": args.tmax, "model": args.model,
                     "mode": args.mode, "output": args.output}
        cfg.update({k: v for k, v in overrides.items() if v is not None})
        result = RUNNERS[args.experiment](cfg)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"ttnbug: config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, RankGrowthError, FloatingPointError, MemoryError) as exc:
        print(f"ttnbug: numerical failure: {exc}", file=sys.stderr)
        return 3
    if args.experiment != "ranktrace":
        for row in result[1]:
            print(", ".join(f"{k}={v}" for k, v in row.items()))
    else:
        print(f"{len(result)} rows")
    return 0


if __name__ == "__main__":
    sys.exit(main())
