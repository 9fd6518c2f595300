"""End-to-end incremental run: M_0, every incremental step, checkpoints, metrics."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Manifest, load_checkpoint, load_sample, read_manifest, save_checkpoint
from .distill import DistillConfig, Variant
from .errors import KdsegError, ParameterError
from .metrics import ConfusionMatrix, Summary, summary, write_metrics_csv
from .scenario import (
    ClassSchedule,
    Mode,
    Ordering,
    SampleIndex,
    StepDataset,
    build_splits,
    format_plan,
    named_scenarios,
    relabel,
)
from .segnet import FreezePolicy, SegModel, extend_classifier, snapshot
from .trainer import AugmentSpec, StepLog, TrainConfig, predict, train_incremental, train_initial

log = logging.getLogger(__name__)

IGNORE_INDEX = 255
TEST_FRACTION_MOD = 5  # one id-hash bucket in five is held out


def is_test_id(sample_id: str) -> bool:
    return zlib.crc32(sample_id.encode("utf-8")) % TEST_FRACTION_MOD == 0


def split_ids(ids: Sequence[str]) -> tuple[list[str], list[str]]:
    train = [i for i in ids if not is_test_id(i)]
    test = [i for i in ids if is_test_id(i)]
    return train, test


@dataclass
class ExperimentConfig:
    data: str
    out: str
    scenario: str = "add-last-1"
    mode: Mode = Mode.LEARNING
    order: Ordering = Ordering.GIVEN
    distill: Variant = Variant.NONE
    lambda_d: float = 1.0
    temperature: float = 2.0
    dec_branches: tuple[int, ...] = (1, 2, 3, 4)
    freeze: FreezePolicy = FreezePolicy.NONE
    seed: int = 0
    steps_per_class: int = 200
    crop: int = 64
    batch_size: int = 4
    lr_initial: float = 0.05
    lr_incremental: float = 0.025
    lr_end: float = 1e-6
    power: float = 0.9
    weight_decay: float = 1e-4
    momentum: float = 0.0
    log_interval: int = 50
    init_from: str | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.order = Ordering(self.order)
        self.distill = Variant(self.distill)
        self.freeze = FreezePolicy(self.freeze)
        self.dec_branches = tuple(self.dec_branches)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(self.distill, self.lambda_d, self.temperature, self.dec_branches)

    def train_config(self, incremental: bool) -> TrainConfig:
        return TrainConfig(
            lr_start=self.lr_incremental if incremental else self.lr_initial,
            lr_end=self.lr_end,
            power=self.power,
            steps_per_class=self.steps_per_class,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            batch_size=self.batch_size,
            crop=self.crop,
            seed=self.seed,
            distill=self.distill_config() if incremental else DistillConfig(),
            freeze=self.freeze if incremental else FreezePolicy.NONE,
            augment=AugmentSpec(),
            log_interval=self.log_interval,
        )

    @property
    def method(self) -> str:
        tag = {FreezePolicy.NONE: "", FreezePolicy.ENCODER: "EF", FreezePolicy.FIRST_TWO: "E2LF"}[self.freeze]
        dist = "" if self.distill is Variant.NONE or self.lambda_d == 0 else self.distill.value
        parts = [p for p in (tag, dist) if p]
        return "+".join(parts) if parts else "fine-tuning"

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("mode", "order", "distill", "freeze"):
            d[key] = getattr(self, key).value
        d["dec_branches"] = list(self.dec_branches)
        d["method"] = self.method
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


@dataclass
class Plan:
    manifest: Manifest
    schedule: ClassSchedule
    splits: list[StepDataset]
    train_ids: list[str]
    test_ids: list[str]

    @property
    def channel_order(self) -> list[int]:
        return self.schedule.channel_order

    def label_lut(self) -> np.ndarray:
        """Dataset class id -> model output channel; unknown ids map to ignore."""
        lut = np.full(256, IGNORE_INDEX, np.int64)
        for ch, c in enumerate(self.channel_order):
            lut[c] = ch
        return lut


def index_for(manifest: Manifest, ids: Sequence[str], with_counts: bool) -> SampleIndex:
    presence = manifest.presence()
    return SampleIndex(
        class_names=list(manifest.class_names),
        presence={i: presence[i] for i in ids},
        pixel_counts=manifest.pixel_counts(ids) if with_counts else None,
    )


def prepare(cfg: ExperimentConfig) -> Plan:
    """Validate the configuration and build the plan without writing anything."""
    if cfg.scenario not in named_scenarios():
        raise ParameterError(f"unknown scenario {cfg.scenario!r}; choose from {', '.join(named_scenarios())}")
    cfg.train_config(False)
    cfg.train_config(True)
    if cfg.init_from is not None and not Path(cfg.init_from).is_file():
        raise ParameterError(f"--init-from checkpoint {cfg.init_from} does not exist")
    manifest = read_manifest(cfg.data)
    if not len(manifest):
        raise ParameterError(f"dataset {cfg.data} is empty")
    train_ids, test_ids = split_ids(manifest.ids)
    index = index_for(manifest, train_ids, cfg.order is Ordering.FREQUENCY)
    schedule = named_scenarios()[cfg.scenario].schedule(index, cfg.order)
    splits = build_splits(index, schedule, cfg.mode)
    if cfg.init_from is not None:
        n0 = len(schedule.seen(0))
        found = load_checkpoint(cfg.init_from).num_classes
        if found != n0:
            raise ParameterError(f"--init-from model has {found} classes, S_0 has {n0}")
    return Plan(manifest, schedule, splits, train_ids, test_ids)


def load_step_samples(plan: Plan, split: StepDataset, lut: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    k = split.k
    s_prev = plan.schedule.seen(k - 1) if k > 0 else []
    u_k = plan.schedule.added(k)
    out = []
    for sid in split.sample_ids:
        image, labels = load_sample(plan.manifest, sid)
        if k > 0:
            labels = relabel(labels, split.mode, s_prev, u_k)
        out.append((image, lut[labels]))
    return out


def load_eval_set(plan: Plan, lut: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for sid in plan.test_ids:
        image, lab = load_sample(plan.manifest, sid)
        images.append(image)
        labels.append(lut[lab])
    return np.stack(images), np.stack(labels)


def evaluate(model, images: np.ndarray, labels: np.ndarray, num_classes: int, batch_size: int = 16) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    if len(images):
        cm.accumulate(predict(model, images, batch_size), labels)
    return cm


def step_summary(cm: ConfusionMatrix, schedule: ClassSchedule, k: int) -> Summary:
    """Old/new grouping in channel space: old = S_{k-1}, new = U_k (S_0 / none at k = 0)."""
    n_seen = len(schedule.seen(k))
    if k == 0:
        return summary(cm, list(range(n_seen)), [])
    n_prev = len(schedule.seen(k - 1))
    return summary(cm, list(range(n_prev)), list(range(n_prev, n_seen)))


def _log_writer(path: Path):
    fh = open(path, "w", encoding="utf-8")

    def sink(entry: StepLog) -> None:
        fh.write(entry.line() + "\n")
        log.info("%s: %s", path.stem, entry.line())

    return fh, sink


def run_experiment(cfg: ExperimentConfig, plan: Plan | None = None) -> Path:
    plan = plan or prepare(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    (out / "plan.txt").write_text(format_plan(plan.schedule), encoding="utf-8")

    schedule = plan.schedule
    lut = plan.label_lut()
    C = len(plan.channel_order)
    names = [schedule.name(c) for c in plan.channel_order]
    eval_images, eval_labels = load_eval_set(plan, lut)
    rows: list[tuple[str, int, Summary]] = []

    def finish(model: SegModel, k: int) -> None:
        save_checkpoint(model, out / f"M{k}.ckpt")
        cm = evaluate(model, eval_images, eval_labels, C)
        s = step_summary(cm, schedule, k)
        rows.append((cfg.method, k, s))
        np.savetxt(out / f"confusion_M{k}.txt", cm.counts, fmt="%d")
        log.info("M%d: mIoU %.4f  mIoU old %s  mIoU new %s", k, s.mIoU or 0.0, s.mIoU_old, s.mIoU_new)

    stage = "M0"
    try:
        n0 = len(schedule.seen(0))
        if cfg.init_from is not None:
            model = load_checkpoint(cfg.init_from)
        else:
            model = SegModel(n0, seed=cfg.seed)
            samples = load_step_samples(plan, plan.splits[0], lut)
            fh, sink = _log_writer(out / "train_M0.log")
            with fh:
                train_initial(model, samples, cfg.train_config(False), n0, sink=sink)
        finish(model, 0)

        for split in plan.splits[1:]:
            k = split.k
            stage = f"M{k}"
            teacher = snapshot(model)
            student = extend_classifier(model, len(schedule.added(k)), seed=cfg.seed * 1000 + k)
            samples = load_step_samples(plan, split, lut)
            fh, sink = _log_writer(out / f"train_M{k}.log")
            with fh:
                model, _ = train_incremental(teacher, student, samples, cfg.train_config(True), step_index=k, sink=sink)
            finish(model, k)
    except KdsegError as exc:
        raise type(exc)(f"{stage}: {exc} (scenario {cfg.scenario}, output {out})") from exc
    finally:
        if rows:
            write_metrics_csv(out / "metrics.csv", names, rows)
    return out
