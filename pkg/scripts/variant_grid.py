#!/usr/bin/env python3
"""Compare every distillation variant and freeze policy on one scenario.

All runs reuse a single M_0 so that only the incremental step differs.

    python scripts/variant_grid.py --data runs/forgetting/data --scenario add-last-1 --work runs/grid
"""
import argparse
import itertools
import sys
from pathlib import Path

from kdseg.cli import main as kdseg
from kdseg.distill import Variant
from kdseg.segnet import FreezePolicy


def run(args) -> int:
    work = Path(args.work)
    shared = ["--data", args.data, "--scenario", args.scenario, "--mode", args.mode, "--order", args.order,
              "--seed", str(args.seed), "--steps-per-class", str(args.steps_per_class)]
    base = work / "fine-tuning"
    if kdseg(["run", *shared, "--out", str(base)]):
        return 1
    runs = [base]
    for variant, freeze in itertools.product(list(Variant), list(FreezePolicy)):
        if variant is Variant.NONE and freeze is FreezePolicy.NONE:
            continue
        out = work / f"{freeze.value}-{variant.value}"
        argv = ["run", *shared, "--distill", variant.value, "--freeze", freeze.value, "--lambda", str(args.lambda_d),
                "--temp", str(args.temp), "--init-from", str(base / "M0.ckpt"), "--out", str(out)]
        if kdseg(argv):
            return 1
        runs.append(out)
    return kdseg(["report", "--runs", *map(str, runs), "--out", str(work / "report.csv")])


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--work", default="runs/grid")
    p.add_argument("--scenario", default="add-last-1")
    p.add_argument("--mode", default="learning")
    p.add_argument("--order", default="given")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--steps-per-class", type=int, default=200)
    p.add_argument("--lambda", dest="lambda_d", type=float, default=1.0)
    p.add_argument("--temp", type=float, default=2.0)
    sys.exit(run(p.parse_args()))
