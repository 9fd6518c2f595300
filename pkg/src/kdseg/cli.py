"""Command-line entry point: ``kdseg gen | run | report``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import filecmp
import logging
import os
import sys
import tempfile
from pathlib import Path

from .data import SyntheticSpec, generate
from .distill import Variant
from .errors import KdsegError, ParameterError, ReportError
from .experiment import ExperimentConfig, prepare, run_experiment
from .metrics import TABLE_METRICS
from .scenario import Mode, Ordering, named_scenarios
from .segnet import FreezePolicy


class UsageError(Exception):
    pass


def _configure_logging() -> None:
    level = os.environ.get("KDSEG_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _branches(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated branch numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdseg", description="Incremental segmentation with knowledge distillation.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic shapes dataset")
    g.add_argument("--classes", type=int, default=6)
    g.add_argument("--images", type=int, default=500)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skew", type=float, default=0.5)
    g.add_argument("--shapes", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"))
    g.add_argument("--out", required=True)
    g.add_argument("--verify", action="store_true", help="regenerate and check the existing files are byte-identical")

    r = sub.add_parser("run", help="train M_0 and every incremental step, writing checkpoints and metrics")
    r.add_argument("--data", required=True)
    r.add_argument("--scenario", default="add-last-1", choices=sorted(named_scenarios()))
    r.add_argument("--mode", default=Mode.LEARNING.value, choices=[m.value for m in Mode])
    r.add_argument("--order", default=Ordering.GIVEN.value, choices=[o.value for o in Ordering])
    r.add_argument("--distill", default=Variant.NONE.value, choices=[v.value for v in Variant])
    r.add_argument("--lambda", dest="lambda_d", type=float, default=1.0)
    r.add_argument("--temp", type=float, default=2.0)
    r.add_argument("--dec-branches", type=_branches, default=(1, 2, 3, 4))
    r.add_argument("--freeze", default=FreezePolicy.NONE.value, choices=[f.value for f in FreezePolicy])
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--steps-per-class", type=int, default=200)
    r.add_argument("--crop", type=int, default=64)
    r.add_argument("--batch-size", type=int, default=4)
    r.add_argument("--lr-initial", type=float, default=ExperimentConfig.lr_initial)
    r.add_argument("--lr-incremental", type=float, default=ExperimentConfig.lr_incremental)
    r.add_argument("--lr-end", type=float, default=1e-6)
    r.add_argument("--weight-decay", type=float, default=1e-4)
    r.add_argument("--momentum", type=float, default=0.0)
    r.add_argument("--log-interval", type=int, default=50)
    r.add_argument("--init-from", default=None, help="reuse an M0 checkpoint instead of training it")
    r.add_argument("--out", required=True)

    p = sub.add_parser("report", help="merge per-run metrics into one comparison table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


def cmd_gen(args) -> int:
    spec = SyntheticSpec(args.classes, args.images, args.size, tuple(args.shapes), args.seed, args.skew)
    try:
        spec.validate()
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    if not args.verify:
        generate(spec, out)
        print(f"wrote {args.images} samples to {out}")
        return 0
    with tempfile.TemporaryDirectory() as tmp:
        generate(spec, tmp)
        cmp = filecmp.dircmp(tmp, out)
        diffs = _tree_diffs(cmp)
    if diffs:
        for d in diffs[:20]:
            print(f"differs: {d}", file=sys.stderr)
        return 1
    print(f"verified: {out} matches a fresh generation")
    return 0


def _tree_diffs(cmp: filecmp.dircmp, prefix: str = "") -> list[str]:
    out = [prefix + n for n in cmp.left_only + cmp.right_only + cmp.funny_files]
    _, mismatch, errors = filecmp.cmpfiles(cmp.left, cmp.right, cmp.common_files, shallow=False)
    out += [prefix + n for n in mismatch + errors]
    for name, subcmp in cmp.subdirs.items():
        out += _tree_diffs(subcmp, f"{prefix}{name}/")
    return out


def cmd_run(args) -> int:
    try:
        cfg = ExperimentConfig(
            data=args.data,
            out=args.out,
            scenario=args.scenario,
            mode=args.mode,
            order=args.order,
            distill=args.distill,
            lambda_d=args.lambda_d,
            temperature=args.temp,
            dec_branches=args.dec_branches,
            freeze=args.freeze,
            seed=args.seed,
            steps_per_class=args.steps_per_class,
            crop=args.crop,
            batch_size=args.batch_size,
            lr_initial=args.lr_initial,
            lr_incremental=args.lr_incremental,
            lr_end=args.lr_end,
            weight_decay=args.weight_decay,
            momentum=args.momentum,
            log_interval=max(1, args.log_interval),
            init_from=args.init_from,
        )
        plan = prepare(cfg)
    except ParameterError as exc:
        raise UsageError(str(exc)) from exc
    out = run_experiment(cfg, plan)
    print(f"run complete: {out}")
    return 0


REPORT_KEYS = ("method", "step")


def read_metrics(run_dir) -> tuple[list[str], list[dict[str, str]]]:
    path = Path(run_dir) / "metrics.csv"
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = list(reader.fieldnames or [])
    except OSError as exc:
        raise ReportError(f"{path}: cannot read metrics ({exc.strerror})") from exc
    if header[:2] != list(REPORT_KEYS):
        raise ReportError(f"{path}: not a metrics table")
    classes = header[2:header.index(TABLE_METRICS[0])] if TABLE_METRICS[0] in header else []
    return classes, rows


def merge_reports(run_dirs, out_path) -> list[list[str]]:
    """One row per (method, step); columns are per-class IoU then the grouped metrics."""
    classes = None
    table = []
    seen_methods: set[str] = set()
    for run in run_dirs:
        run_classes, rows = read_metrics(run)
        if classes is None:
            classes = run_classes
        elif run_classes != classes:
            raise ReportError(f"{run}: class columns {run_classes} differ from {classes}")
        methods = {r["method"] for r in rows}
        rename = {}
        for m in sorted(methods):
            if m in seen_methods:
                rename[m] = f"{Path(run).name}:{m}"
            seen_methods.add(rename.get(m, m))
        for r in rows:
            method = rename.get(r["method"], r["method"])
            table.append([method, r["step"], *(r[c] for c in classes), *(r[m] for m in TABLE_METRICS)])
    header = [*REPORT_KEYS, *(classes or []), *TABLE_METRICS]
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(table)
    return [header, *table]


def cmd_report(args) -> int:
    merge_reports(args.runs, args.out)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "report": cmd_report}


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"kdseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (KdsegError, OSError) as exc:
        print(f"kdseg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
