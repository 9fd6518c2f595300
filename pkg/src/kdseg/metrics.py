"""Confusion-matrix segmentation metrics: per-class PA/IoU, mPA, mCA, mIoU."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ShapeError

IGNORE_INDEX = 255


class ConfusionMatrix:
    """counts[g, p] = number of pixels with ground truth g predicted as p."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt, ignore_index: int = IGNORE_INDEX) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        keep = gt != ignore_index
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        C = self.num_classes
        for name, arr in (("ground truth", g), ("prediction", p)):
            bad = (arr < 0) | (arr >= C)
            if np.any(bad):
                raise DataError(f"{name} class {int(arr[bad][0])} outside [0, {C})")
        self.counts += np.bincount(g * C + p, minlength=C * C).reshape(C, C)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt, ignore_index: int = IGNORE_INDEX) -> None:
    cm.accumulate(pred, gt, ignore_index)


def _ratio(num: np.ndarray, den: np.ndarray) -> list[float | None]:
    return [float(n) / float(d) if d > 0 else None for n, d in zip(num, den)]


def per_class_iou(cm: ConfusionMatrix) -> list[float | None]:
    c = cm.counts
    tp = np.diag(c)
    return _ratio(tp, c.sum(axis=1) + c.sum(axis=0) - tp)


def per_class_pa(cm: ConfusionMatrix) -> list[float | None]:
    c = cm.counts
    return _ratio(np.diag(c), c.sum(axis=1))


def _mean_defined(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class Summary:
    per_class_pa: list[float | None]
    per_class_iou: list[float | None]
    mPA: float | None
    mCA: float | None
    mIoU: float | None
    mIoU_old: float | None
    mIoU_new: float | None


def summary(cm: ConfusionMatrix, old_classes: Sequence[int] = (), new_classes: Sequence[int] = ()) -> Summary:
    """mPA is global pixel accuracy, mCA the mean per-class recall.

    Classes whose ratio is 0/0 are left out of every mean.
    """
    pa = per_class_pa(cm)
    iou = per_class_iou(cm)
    total = cm.total
    return Summary(
        per_class_pa=pa,
        per_class_iou=iou,
        mPA=float(np.trace(cm.counts)) / total if total else None,
        mCA=_mean_defined(pa),
        mIoU=_mean_defined(iou),
        mIoU_old=_mean_defined(iou[c] for c in old_classes),
        mIoU_new=_mean_defined(iou[c] for c in new_classes),
    )


TABLE_METRICS = ("mIoU old", "mIoU new", "mIoU", "mPA", "mCA")


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def table_row(method: str, step: int, s: Summary) -> list[str]:
    return (
        [method, str(step)]
        + [_fmt(v) for v in s.per_class_iou]
        + [_fmt(v) for v in (s.mIoU_old, s.mIoU_new, s.mIoU, s.mPA, s.mCA)]
        + [_fmt(v) for v in s.per_class_pa]
    )


def table_header(class_names: Sequence[str]) -> list[str]:
    """method, step, per-class IoU, grouped metrics, then per-class PA columns."""
    return ["method", "step", *class_names, *TABLE_METRICS, *(f"PA {n}" for n in class_names)]


def write_metrics_csv(path, class_names: Sequence[str], rows: Sequence[tuple[str, int, Summary]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table_header(class_names))
        for method, step, s in rows:
            w.writerow(table_row(method, step, s))
