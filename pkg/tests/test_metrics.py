import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdseg.errors import DataError
from kdseg.metrics import ConfusionMatrix, per_class_iou, per_class_pa, summary, table_header, write_metrics_csv


def set_oracle(pred, gt, C, ignore=255):
    """Per-class metrics from explicit pixel-coordinate sets."""
    coords = {tuple(ix) for ix in np.argwhere(gt != ignore)}
    gt_sets = {c: {ix for ix in coords if gt[ix] == c} for c in range(C)}
    pr_sets = {c: {ix for ix in coords if pred[ix] == c} for c in range(C)}
    iou, pa = [], []
    for c in range(C):
        inter = len(gt_sets[c] & pr_sets[c])
        union = len(gt_sets[c] | pr_sets[c])
        iou.append(inter / union if union else None)
        pa.append(inter / len(gt_sets[c]) if gt_sets[c] else None)
    correct = sum(1 for ix in coords if pred[ix] == gt[ix])
    return iou, pa, (correct / len(coords) if coords else None)


def _cm(counts):
    cm = ConfusionMatrix(len(counts))
    cm.counts = np.array(counts, dtype=np.int64)
    return cm


def test_balanced_two_class_example():
    s = summary(_cm([[3, 1], [1, 3]]))
    assert s.per_class_iou == [0.6, 0.6]
    assert (s.mPA, s.mCA, s.mIoU) == (0.75, 0.75, 0.6)


def test_false_positive_signature():
    s = summary(_cm([[5, 5], [0, 10]]))
    assert s.per_class_pa[1] == 1.0
    assert s.per_class_iou[1] == pytest.approx(10 / 15)


def test_old_new_grouping_and_undefined_classes():
    s = summary(_cm([[4, 0, 0], [1, 3, 0], [0, 0, 0]]), old_classes=[0, 1], new_classes=[2])
    assert s.per_class_iou[2] is None and s.per_class_pa[2] is None
    assert s.mIoU_new is None
    assert s.mIoU_old == pytest.approx((4 / 5 + 3 / 4) / 2)
    assert s.mIoU == s.mIoU_old


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), C=st.integers(1, 8))
def test_matches_set_oracle(seed, C):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, C, size=(8, 8))
    gt[rng.random((8, 8)) < 0.1] = 255
    pred = rng.integers(0, C, size=(8, 8))
    cm = ConfusionMatrix(C)
    cm.accumulate(pred, gt)
    iou, pa, acc = set_oracle(pred, gt, C)
    assert per_class_iou(cm) == iou
    assert per_class_pa(cm) == pa
    assert summary(cm).mPA == acc


def test_accumulation_is_additive_over_chunks():
    rng = np.random.default_rng(0)
    gt, pred = rng.integers(0, 5, size=(6, 10, 10)), rng.integers(0, 5, size=(6, 10, 10))
    whole = ConfusionMatrix(5)
    whole.accumulate(pred, gt)
    parts = [ConfusionMatrix(5) for _ in range(3)]
    for part, idx in zip(parts, np.array_split(rng.permutation(6), 3)):
        part.accumulate(pred[idx], gt[idx])
    merged = parts[0].merge(parts[1]).merge(parts[2])
    np.testing.assert_array_equal(merged.counts, whole.counts)


def test_iou_never_exceeds_pa():
    rng = np.random.default_rng(1)
    cm = ConfusionMatrix(6)
    cm.accumulate(rng.integers(0, 6, size=(20, 20)), rng.integers(0, 6, size=(20, 20)))
    for i, p in zip(per_class_iou(cm), per_class_pa(cm)):
        assert i <= p


def test_ignore_pixels_are_skipped_and_bad_ids_rejected():
    cm = ConfusionMatrix(2)
    cm.accumulate(np.array([0, 1, 1]), np.array([0, 255, 1]))
    assert cm.total == 2
    with pytest.raises(DataError):
        cm.accumulate(np.array([0]), np.array([3]))
    with pytest.raises(DataError):
        cm.accumulate(np.array([2]), np.array([0]))


def test_metrics_csv_layout(tmp_path):
    s = summary(_cm([[3, 1], [1, 3]]), [0], [1])
    path = tmp_path / "m.csv"
    write_metrics_csv(path, ["bg", "thing"], [("fine-tuning", 1, s)])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == table_header(["bg", "thing"])
    assert rows[1][:4] == ["fine-tuning", "1", "0.600000", "0.600000"]
