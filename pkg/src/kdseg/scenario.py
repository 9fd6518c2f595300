"""Class schedules, per-step training splits and incremental relabeling.

Class ids here are dataset ids (background is 0). A schedule lists the initial
seen set S_0 followed by the classes added at each step U_1, U_2, ...
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DataError, ParameterError, ScenarioError

BACKGROUND = 0
IGNORE_INDEX = 255


class Ordering(str, Enum):
    GIVEN = "given"
    ALPHABETICAL = "alphabetical"
    FREQUENCY = "frequency"


class Mode(str, Enum):
    LEARNING = "learning"
    LABELING = "labeling"


@dataclass
class SampleIndex:
    """What planning needs to know about a dataset: ids, per-sample classes, counts."""

    class_names: list[str]
    presence: dict[str, frozenset[int]]
    pixel_counts: np.ndarray | None = None

    @property
    def ids(self) -> list[str]:
        return list(self.presence)


@dataclass
class ClassSchedule:
    all_classes: list[int]
    initial: list[int]
    steps: list[list[int]]
    ordering: Ordering = Ordering.GIVEN
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        groups = [self.initial, *self.steps]
        flat = [c for g in groups for c in g]
        if len(flat) != len(set(flat)):
            raise ScenarioError("schedule class sets are not pairwise disjoint")
        if not set(flat) <= set(self.all_classes):
            raise ScenarioError(f"schedule uses classes outside the dataset: {sorted(set(flat) - set(self.all_classes))}")
        if BACKGROUND not in self.initial:
            raise ScenarioError("background (class 0) must belong to the initial set")
        if any(not g for g in self.steps):
            raise ScenarioError("every incremental step must add at least one class")

    def seen(self, k: int) -> list[int]:
        """S_k: the classes known after step k (k = 0 is the initial set)."""
        out = list(self.initial)
        for g in self.steps[:k]:
            out.extend(g)
        return out

    def added(self, k: int) -> list[int]:
        """U_k for k >= 1; S_0 for k == 0."""
        return list(self.initial) if k == 0 else list(self.steps[k - 1])

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def channel_order(self) -> list[int]:
        """Dataset class id of each model output channel after the final step."""
        return self.seen(self.num_steps)

    def name(self, c: int) -> str:
        return self.class_names[c] if c < len(self.class_names) else f"c{c}"


@dataclass
class StepDataset:
    k: int
    sample_ids: list[str]
    mode: Mode


def order_classes(index: SampleIndex, ordering: Ordering | str) -> list[int]:
    """All class ids in the requested order; background always first."""
    ordering = Ordering(ordering)
    if not index.presence:
        raise DataError("cannot order classes of an empty dataset")
    C = len(index.class_names)
    rest = list(range(1, C))
    if ordering is Ordering.ALPHABETICAL:
        rest.sort(key=lambda c: (index.class_names[c].lower(), c))
    elif ordering is Ordering.FREQUENCY:
        if index.pixel_counts is None:
            raise DataError("frequency ordering needs per-class pixel counts")
        counts = index.pixel_counts
        rest.sort(key=lambda c: (-int(counts[c]), c))
    return [BACKGROUND, *rest]


def build_splits(index: SampleIndex, schedule: ClassSchedule, mode: Mode | str = Mode.LEARNING) -> list[StepDataset]:
    """Greedy, order-preserving assignment of samples to steps.

    Step 0 takes samples made only of S_0 classes. Step k takes unassigned
    samples containing some U_k class and nothing outside S_{k-1} | U_k.
    """
    mode = Mode(mode)
    assigned: set[str] = set()
    splits = []
    for k in range(schedule.num_steps + 1):
        allowed = set(schedule.seen(k))
        new = set(schedule.added(k))
        ids = []
        for sid, classes in index.presence.items():
            if sid in assigned or not classes <= allowed:
                continue
            if k > 0 and not classes & new:
                continue
            ids.append(sid)
        assigned.update(ids)
        if k > 0:
            covered = set().union(*(index.presence[s] for s in ids)) if ids else set()
            for c in schedule.added(k):
                if c not in covered:
                    raise ScenarioError(f"step {k}: no eligible training sample contains class {schedule.name(c)!r}")
        elif not ids:
            raise ScenarioError("step 0: no training sample contains only initial classes")
        splits.append(StepDataset(k, ids, mode))
    return splits


def relabel(labels, mode: Mode | str, s_prev: Sequence[int], u_k: Sequence[int], ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Labeling mode maps every old non-background class to background."""
    mode = Mode(mode)
    labels = np.asarray(labels)
    known = set(s_prev) | set(u_k) | {ignore_index}
    present = set(np.unique(labels).tolist())
    unknown = present - known
    if unknown:
        raise DataError(f"label map contains class id(s) {sorted(unknown)} outside S_prev | U_k")
    if mode is Mode.LEARNING:
        return labels.copy()
    old = np.array(sorted(set(s_prev) - {BACKGROUND}), dtype=labels.dtype)
    out = labels.copy()
    out[np.isin(labels, old)] = BACKGROUND
    return out


# ---------------------------------------------------------------- named scenarios


def _plan(initial_size: int, step_sizes: Sequence[int]) -> Callable[[Sequence[int]], tuple[list[int], list[list[int]]]]:
    def build(order: Sequence[int]):
        need = initial_size + sum(step_sizes)
        if len(order) < need:
            raise ParameterError(f"plan needs {need} classes, dataset has {len(order)}")
        order = list(order)[:need]
        initial = order[:initial_size]
        steps, pos = [], initial_size
        for n in step_sizes:
            steps.append(order[pos:pos + n])
            pos += n
        return initial, steps

    return build


MIN_INITIAL = 2  # background plus at least one object class


@dataclass(frozen=True)
class ScenarioPlan:
    name: str
    added: tuple[int, ...]  # sizes of U_1, U_2, ...

    def schedule(self, index: SampleIndex, ordering: Ordering | str = Ordering.GIVEN) -> ClassSchedule:
        order = order_classes(index, ordering)
        initial_size = len(order) - sum(self.added)
        if initial_size < MIN_INITIAL:
            raise ParameterError(
                f"scenario {self.name!r} needs at least {sum(self.added) + MIN_INITIAL} classes, dataset has {len(order)}"
            )
        initial, steps = _plan(initial_size, self.added)(order)
        return ClassSchedule(list(range(len(order))), initial, steps, Ordering(ordering), list(index.class_names))


def named_scenarios() -> dict[str, ScenarioPlan]:
    plans = [
        ScenarioPlan("add-last-1", (1,)),
        ScenarioPlan("add-last-5-at-once", (5,)),
        ScenarioPlan("add-last-10-at-once", (10,)),
        ScenarioPlan("add-5-then-5", (5, 5)),
        ScenarioPlan("add-5-sequentially", (1,) * 5),
        ScenarioPlan("add-10-sequentially", (1,) * 10),
    ]
    return {p.name: p for p in plans}


# ---------------------------------------------------------------- plan text format


def format_plan(schedule: ClassSchedule) -> str:
    lines = []
    for k in range(schedule.num_steps + 1):
        lines.append(f"step {k}: " + ",".join(schedule.name(c) for c in schedule.added(k)))
    return "\n".join(lines) + "\n"


def parse_plan(text: str, class_names: Sequence[str], ordering: Ordering | str = Ordering.GIVEN) -> ClassSchedule:
    lookup: Mapping[str, int] = {n: i for i, n in enumerate(class_names)}
    groups: list[list[int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        head, sep, body = line.partition(":")
        parts = head.split()
        if not sep or len(parts) != 2 or parts[0] != "step" or not parts[1].isdigit():
            raise ParameterError(f"plan line {lineno}: expected 'step <k>: <classes>', got {line!r}")
        if int(parts[1]) != len(groups):
            raise ParameterError(f"plan line {lineno}: step {parts[1]} out of order")
        names = [n.strip() for n in body.split(",") if n.strip()]
        try:
            groups.append([lookup[n] for n in names])
        except KeyError as exc:
            raise ParameterError(f"plan line {lineno}: unknown class {exc.args[0]!r}") from None
    if not groups:
        raise ParameterError("empty plan")
    return ClassSchedule(list(range(len(class_names))), groups[0], groups[1:], Ordering(ordering), list(class_names))
