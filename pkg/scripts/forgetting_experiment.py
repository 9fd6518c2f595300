#!/usr/bin/env python3
"""Seeded single-class forgetting study on the synthetic shapes data.

Generates the dataset, trains fine-tuning and E_F + cls-T (sharing one M_0),
merges both into ``report.csv`` and prints the old-class drop, the share of it
that distillation recovers, and the new-class PA/IoU gap.

    python scripts/forgetting_experiment.py --work runs/forgetting
"""
import argparse
import csv
import sys
from pathlib import Path

from kdseg.cli import main as kdseg
from kdseg.data import read_manifest


def _rows(path):
    with open(path, newline="") as fh:
        return {int(r["step"]): r for r in csv.DictReader(fh)}


def run(args) -> int:
    work = Path(args.work)
    data, ft, kd = work / "data", work / "fine-tuning", work / "ef-cls-t"
    if not (data / "manifest.tsv").exists():
        code = kdseg(["gen", "--classes", "6", "--images", "500", "--size", "64", "--seed", str(args.seed),
                      "--out", str(data)])
        if code:
            return code
    common = ["--data", str(data), "--scenario", "add-last-1", "--seed", str(args.seed),
              "--steps-per-class", str(args.steps_per_class)]
    for argv in (
        ["run", *common, "--out", str(ft)],
        ["run", *common, "--distill", "cls-t", "--lambda", str(args.lambda_d), "--temp", str(args.temp),
         "--freeze", "encoder", "--init-from", str(ft / "M0.ckpt"), "--out", str(kd)],
        ["report", "--runs", str(ft), str(kd), "--out", str(work / "report.csv")],
    ):
        code = kdseg(argv)
        if code:
            return code

    a, b = _rows(ft / "metrics.csv"), _rows(kd / "metrics.csv")
    new = read_manifest(data).class_names[-1]
    m0 = float(a[0]["mIoU old"])
    drop = m0 - float(a[1]["mIoU old"])
    print(f"M0 mIoU on old classes      {m0:.4f}")
    print(f"fine-tuning  mIoU old       {float(a[1]['mIoU old']):.4f}  (drop {100 * drop:.2f} pts)")
    print(f"EF + cls-T   mIoU old       {float(b[1]['mIoU old']):.4f}")
    if drop > 0:
        print(f"share of drop recovered     {(float(b[1]['mIoU old']) - float(a[1]['mIoU old'])) / drop:.0%}")
    for name, rows in (("fine-tuning", a), ("EF + cls-T", b)):
        pa, iou = float(rows[1][f"PA {new}"]), float(rows[1][new])
        print(f"{name:12s} new class PA {pa:.3f}  IoU {iou:.3f}  gap {100 * (pa - iou):.1f} pts")
    return 0


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="runs/forgetting")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--steps-per-class", type=int, default=200)
    p.add_argument("--lambda", dest="lambda_d", type=float, default=1.0)
    p.add_argument("--temp", type=float, default=2.0)
    sys.exit(run(p.parse_args()))
