"""SGD training for the initial stage and for incremental steps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .distill import DistillConfig, distillation_term, loss_ce, total_loss
from .errors import DataError, ParameterError, ScenarioError
from .segnet import DOWNSAMPLE, FreezePolicy, ModelSnapshot, SegModel, apply_freeze
from .tensor import Tensor, backward, bilinear_resize_array, no_grad

log = logging.getLogger(__name__)

IGNORE_INDEX = 255

Sample = tuple[np.ndarray, np.ndarray]  # float32 H x W x 3 image, int label map


@dataclass
class AugmentSpec:
    flip_prob: float = 0.5
    scale_min: float = 0.5
    scale_max: float = 1.5

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ParameterError(f"bad scale range [{self.scale_min}, {self.scale_max}]")
        if not 0 <= self.flip_prob <= 1:
            raise ParameterError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")


@dataclass
class TrainConfig:
    lr_start: float = 0.05
    lr_end: float = 1e-6
    power: float = 0.9
    steps_per_class: int = 200
    weight_decay: float = 1e-4
    momentum: float = 0.0
    batch_size: int = 4
    crop: int = 64
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    freeze: FreezePolicy = FreezePolicy.NONE
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    log_interval: int = 50

    def __post_init__(self):
        self.freeze = FreezePolicy(self.freeze)
        if not self.lr_start >= self.lr_end > 0:
            raise ParameterError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.crop < DOWNSAMPLE or self.crop % DOWNSAMPLE:
            raise ParameterError(f"crop must be a positive multiple of {DOWNSAMPLE}, got {self.crop}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps_per_class < 0:
            raise ParameterError("steps_per_class must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")


def poly_lr(step: int, total_steps: int, lr_start: float, lr_end: float, power: float = 0.9) -> float:
    if total_steps <= 0:
        raise ParameterError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ParameterError(f"step {step} outside [0, {total_steps}]")
    # endpoints are returned verbatim; the formula can be an ulp off at step 0
    if step == 0:
        return lr_start
    if step == total_steps:
        return lr_end
    return lr_end + (lr_start - lr_end) * (1 - step / total_steps) ** power


# ---------------------------------------------------------------- augmentation


def nearest_resize(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    H, W = labels.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * H / out_h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * W / out_w).astype(np.int64), W - 1)
    return labels[rows[:, None], cols[None, :]]


def augment(image: np.ndarray, labels: np.ndarray, spec: AugmentSpec, rng: np.random.Generator, crop: int) -> Sample:
    """Random flip, random rescale, then a crop x crop window.

    Images are padded with zeros and labels with the ignore index when the
    rescaled sample is smaller than the crop.
    """
    if image.shape[:2] != labels.shape:
        raise DataError(f"image {image.shape[:2]} and labels {labels.shape} are not aligned")
    if rng.random() < spec.flip_prob:
        image, labels = image[:, ::-1], labels[:, ::-1]
    scale = rng.uniform(spec.scale_min, spec.scale_max)
    H, W = labels.shape
    h, w = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    if (h, w) != (H, W):
        image = bilinear_resize_array(image[None], h, w)[0]
        labels = nearest_resize(labels, h, w)
    ph, pw = max(crop - h, 0), max(crop - w, 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
    y0 = int(rng.integers(0, labels.shape[0] - crop + 1))
    x0 = int(rng.integers(0, labels.shape[1] - crop + 1))
    return (
        np.ascontiguousarray(image[y0:y0 + crop, x0:x0 + crop], dtype=np.float32),
        np.ascontiguousarray(labels[y0:y0 + crop, x0:x0 + crop]),
    )


def batches(samples: Sequence[Sample], cfg: TrainConfig, stream: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless augmented batches: sequential cycling with a reshuffle every epoch.

    Batch i augments with its own generator seeded by (seed, stream, i).
    """
    n = len(samples)
    order_rng = np.random.default_rng([cfg.seed, stream, 2**31])
    order = order_rng.permutation(n)
    pos = 0
    i = 0
    while True:
        rng = np.random.default_rng([cfg.seed, stream, i])
        imgs, labs = [], []
        for _ in range(cfg.batch_size):
            if pos == n:
                order = order_rng.permutation(n)
                pos = 0
            image, labels = samples[order[pos]]
            pos += 1
            a, b = augment(image, labels, cfg.augment, rng, cfg.crop)
            imgs.append(a)
            labs.append(b)
        yield np.stack(imgs), np.stack(labs).astype(np.int64)
        i += 1


# ---------------------------------------------------------------- optimizer


class SGD:
    """Plain SGD with decoupled weight decay: p <- p * (1 - lr * wd) - lr * v."""

    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None
        self.steps = 0

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.velocity is not None:
                self.velocity[i] = self.momentum * self.velocity[i] + g
                g = self.velocity[i]
            dtype = p.data.dtype
            if self.weight_decay:
                p.data *= dtype.type(1 - lr * self.weight_decay)
            p.data -= dtype.type(lr) * g
        self.steps += 1


# ---------------------------------------------------------------- loops


@dataclass
class StepLog:
    step: int
    lr: float
    ce: float
    distill: float
    total: float

    def line(self) -> str:
        return f"step {self.step} lr {self.lr:.6g} ce {self.ce:.6f} distill {self.distill:.6f} total {self.total:.6f}"


LogSink = Callable[[StepLog], None]


def _run(
    student: SegModel,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    total_steps: int,
    stream: int,
    teacher: ModelSnapshot | None = None,
    num_old: int = 0,
    sink: LogSink | None = None,
) -> list[StepLog]:
    history: list[StepLog] = []
    if total_steps == 0:
        return history
    opt = SGD(student.parameters(), cfg.weight_decay, cfg.momentum)
    feed = batches(samples, cfg, stream)
    use_teacher = teacher is not None and cfg.distill.active and cfg.distill.lambda_d > 0
    for step in range(total_steps):
        lr = poly_lr(step, total_steps, cfg.lr_start, cfg.lr_end, cfg.power)
        images, labels = next(feed)
        x = Tensor(images)
        out = student.forward(x)
        ce = loss_ce(out.logits, labels, student.num_classes)
        ld = None
        if use_teacher:
            with no_grad():
                t_out = teacher.forward(x)
            ld = distillation_term(cfg.distill, out, t_out, num_old)
        loss = total_loss(ce, ld, cfg.distill.lambda_d if use_teacher else 0.0)
        student.zero_grad()
        backward(loss)
        opt.step(lr)
        entry = StepLog(step, lr, float(ce.data), float(ld.data) if ld is not None else 0.0, float(loss.data))
        history.append(entry)
        if sink is not None and (step % cfg.log_interval == 0 or step == total_steps - 1):
            sink(entry)
    assert opt.steps == total_steps
    return history


def train_initial(model: SegModel, samples: Sequence[Sample], cfg: TrainConfig, num_initial: int | None = None, sink: LogSink | None = None):
    """Train M_0 with cross-entropy for |S_0| * steps_per_class SGD steps.

    Returns the (in-place trained) model and the per-step history.
    """
    num_initial = model.num_classes if num_initial is None else num_initial
    if model.num_classes != num_initial:
        raise ScenarioError(f"model has {model.num_classes} outputs but S_0 has {num_initial} classes")
    if not samples:
        raise DataError("initial training set is empty")
    total = num_initial * cfg.steps_per_class
    history = _run(model, samples, cfg, total, stream=0, sink=sink)
    return model, history


def train_incremental(
    teacher: ModelSnapshot,
    student: SegModel,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    step_index: int = 1,
    sink: LogSink | None = None,
):
    """One incremental step: L = L_CE + lambda_D * L_D for |U_k| * steps_per_class steps.

    ``student`` must already carry the extended classifier; the freeze policy in
    ``cfg`` is applied here.
    """
    added = student.num_classes - teacher.num_classes
    if added < 1:
        raise ScenarioError(f"student has {student.num_classes} outputs, teacher {teacher.num_classes}: nothing added")
    if not samples:
        raise DataError(f"step {step_index}: training set is empty")
    apply_freeze(student, cfg.freeze)
    total = added * cfg.steps_per_class
    history = _run(student, samples, cfg, total, stream=step_index, teacher=teacher, num_old=teacher.num_classes, sink=sink)
    return student, history


def predict(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Arg-max class map for a stack of images."""
    preds = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model.forward(Tensor(images[i:i + batch_size])).logits.data
            preds.append(np.argmax(logits, axis=-1))
    return np.concatenate(preds) if preds else np.zeros((0,) + images.shape[1:3], np.int64)
