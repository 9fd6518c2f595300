"""Cross-entropy and the knowledge-distillation losses between student and teacher.

Teacher-side inputs are always detached: gradients flow into the student only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DataError, ParameterError, ShapeError
from .tensor import (
    Tensor,
    as_tensor,
    frobenius_sq,
    log_softmax_T,
    matmul,
    mul,
    normalize_rows,
    reshape,
    softmax_T,
    spatial_sum,
    transpose,
    tsum,
)

IGNORE_INDEX = 255


class Variant(str, Enum):
    NONE = "none"
    CLS_T = "cls-t"
    ENC = "enc"
    DEC = "dec"
    SPKD = "spkd"
    SPKD_AVG = "spkd-avg"


@dataclass
class DistillConfig:
    variant: Variant = Variant.NONE
    lambda_d: float = 1.0
    temperature: float = 2.0
    dec_branches: tuple[int, ...] = (1, 2, 3, 4)
    # Extra variants summed with the main one; off by default.
    extra_variants: tuple[Variant, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.extra_variants = tuple(Variant(v) for v in self.extra_variants)
        self.dec_branches = tuple(sorted(set(int(b) for b in self.dec_branches)))
        if not self.temperature > 0 or not math.isfinite(self.temperature):
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not self.lambda_d >= 0:
            raise ParameterError(f"lambda_d must be >= 0, got {self.lambda_d}")
        if not self.dec_branches or not set(self.dec_branches) <= {1, 2, 3, 4}:
            raise ParameterError(f"dec_branches must be a non-empty subset of 1..4, got {self.dec_branches}")

    @property
    def active(self) -> bool:
        return self.variant is not Variant.NONE or bool(self.extra_variants)


def class_mask(num_old: int, num_classes: int) -> np.ndarray:
    """True for the first ``num_old`` channels (already-seen classes)."""
    if not 0 <= num_old <= num_classes:
        raise ParameterError(f"cannot mark {num_old} of {num_classes} channels as old")
    mask = np.zeros(num_classes, dtype=bool)
    mask[:num_old] = True
    return mask


def _teacher(t) -> Tensor:
    return as_tensor(t).detach()


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: student shape {a.shape} != teacher shape {b.shape}")


def loss_ce(logits, labels, num_classes: int | None = None, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    C = logits.shape[-1] if num_classes is None else num_classes
    if logits.shape[-1] != C:
        raise ShapeError(f"logits have {logits.shape[-1]} channels, expected {C}")
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape[:-1]}")
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= C))
    if np.any(bad):
        raise DataError(f"label value {int(labels[bad][0])} outside [0, {C}) and not the ignore index {ignore_index}")
    valid = labels != ignore_index
    count = int(valid.sum())
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    if count:
        onehot[valid, labels[valid]] = 1
    picked = tsum(mul(log_softmax_T(logits, 1.0), onehot))
    return mul(picked, -1.0 / max(count, 1))


def loss_cls_T(student_logits, teacher_logits, mask, T: float = 1.0) -> Tensor:
    """Temperature-softened cross-entropy from teacher to student on old channels.

    Both softmaxes run over all C channels; only the outer sum is restricted to
    the channels flagged in ``mask``. Averaged over pixels and batch.
    """
    s = as_tensor(student_logits)
    t = _teacher(teacher_logits)
    _same_shape(s, t, "loss_cls_T")
    return _soft_cross_entropy(s, softmax_T(t, T).data, mask, T)


def _soft_cross_entropy(s: Tensor, p_t: np.ndarray, mask, T: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (s.shape[-1],):
        raise ShapeError(f"mask length {mask.shape} does not match {s.shape[-1]} channels")
    pixels = int(np.prod(s.shape[:-1]))
    return mul(tsum(mul(log_softmax_T(s, T), p_t * mask)), -1.0 / pixels)


def teacher_probs(teacher_logits, channels: int, T: float) -> np.ndarray:
    """Teacher softmax over its own channels, zero-padded to ``channels``.

    The teacher has no outputs for classes added in the current step, so it
    puts no probability mass on them.
    """
    t = _teacher(teacher_logits)
    extra = channels - t.shape[-1]
    if extra < 0:
        raise ShapeError(f"teacher has {t.shape[-1]} channels but student only {channels}")
    p = softmax_T(t, T).data
    if extra:
        p = np.concatenate([p, np.zeros(p.shape[:-1] + (extra,), dtype=p.dtype)], axis=-1)
    return p


def loss_enc(student_features, teacher_features, batch_size: int | None = None) -> Tensor:
    """Squared Frobenius distance between feature maps, averaged over images."""
    s = as_tensor(student_features)
    t = _teacher(teacher_features)
    _same_shape(s, t, "loss_enc")
    B = batch_size or s.shape[0]
    return mul(frobenius_sq(s, t), 1.0 / B)


def loss_dec(student_dilations: Sequence, teacher_dilations: Sequence, branches=(1, 2, 3, 4), batch_size: int | None = None) -> Tensor:
    branches = sorted(set(branches))
    if not branches:
        raise ParameterError("loss_dec needs at least one branch")
    if len(student_dilations) != len(teacher_dilations):
        raise ShapeError("student and teacher expose different numbers of dilation branches")
    if branches[0] < 1 or branches[-1] > len(student_dilations):
        raise ParameterError(f"branch indices must lie in 1..{len(student_dilations)}, got {branches}")
    total = None
    for i in branches:
        s = as_tensor(student_dilations[i - 1])
        t = _teacher(teacher_dilations[i - 1])
        _same_shape(s, t, f"loss_dec branch {i}")
        term = frobenius_sq(s, t)
        total = term if total is None else total + term
    B = batch_size or as_tensor(student_dilations[0]).shape[0]
    return mul(total, 1.0 / (B * len(branches)))


def _similarity(flat: Tensor) -> Tensor:
    """Row-normalized B x B Gram matrix of a B x D matrix."""
    return normalize_rows(matmul(flat, transpose(flat)))


def _spkd_from_matrices(s: Tensor, t: Tensor) -> Tensor:
    B = s.shape[0]
    return mul(frobenius_sq(_similarity(s), _similarity(t)), 1.0 / B)


def loss_spkd(student_features, teacher_features, batch_size: int | None = None) -> Tensor:
    """Similarity-preserving distillation on flattened B x (h*w*F) features."""
    s = as_tensor(student_features)
    t = _teacher(teacher_features)
    _same_shape(s, t, "loss_spkd")
    B = s.shape[0]
    if batch_size is not None and batch_size != B:
        raise ShapeError(f"batch_size {batch_size} does not match features batch {B}")
    return _spkd_from_matrices(reshape(s, (B, -1)), reshape(t, (B, -1)))


def loss_spkd_avg(student_features, teacher_features, batch_size: int | None = None) -> Tensor:
    """SPKD on features summed over spatial positions (B x F)."""
    s = as_tensor(student_features)
    t = _teacher(teacher_features)
    _same_shape(s, t, "loss_spkd_avg")
    if batch_size is not None and batch_size != s.shape[0]:
        raise ShapeError(f"batch_size {batch_size} does not match features batch {s.shape[0]}")
    return _spkd_from_matrices(spatial_sum(s), spatial_sum(t))


def total_loss(ce: Tensor, distill: Tensor | None, lambda_d: float) -> Tensor:
    if distill is None or lambda_d == 0:
        return ce
    return ce + mul(distill, float(lambda_d))


def distillation_term(cfg: DistillConfig, student, teacher, num_old: int) -> Tensor | None:
    """L_D for the configured variant(s), given student and teacher SegOutputs."""
    variants = ([cfg.variant] if cfg.variant is not Variant.NONE else []) + list(cfg.extra_variants)
    total = None
    for v in variants:
        if v is Variant.CLS_T:
            C = student.logits.shape[-1]
            if teacher.logits.shape[:-1] != student.logits.shape[:-1]:
                raise ShapeError(f"teacher logits {teacher.logits.shape} vs student {student.logits.shape}")
            p_t = teacher_probs(teacher.logits, C, cfg.temperature)
            term = _soft_cross_entropy(as_tensor(student.logits), p_t, class_mask(num_old, C), cfg.temperature)
        elif v is Variant.ENC:
            term = loss_enc(student.features, teacher.features)
        elif v is Variant.DEC:
            term = loss_dec(student.dilations, teacher.dilations, cfg.dec_branches)
        elif v is Variant.SPKD:
            term = loss_spkd(student.features, teacher.features)
        elif v is Variant.SPKD_AVG:
            term = loss_spkd_avg(student.features, teacher.features)
        else:
            continue
        total = term if total is None else total + term
    return total

