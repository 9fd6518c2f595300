"""Synthetic shapes dataset, manifest I/O, binary PPM/PGM codecs and checkpoints."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    DataError,
    ParameterError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from .segnet import DOWNSAMPLE, SegModel

IGNORE_INDEX = 255

# ---------------------------------------------------------------- PPM / PGM


def _read_header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse a binary netpbm header; returns magic, width, height, maxval, data offset."""
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated netpbm header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: malformed netpbm header") from exc
    return tokens[0], width, height, maxval, pos


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    got, width, height, maxval, offset = _read_header(buf, path)
    if got != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, found {got[:4]!r}")
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    size = width * height * channels
    raster = buf[offset:offset + size]
    if len(raster) != size:
        raise DataError(f"{path}: raster truncated ({len(raster)} of {size} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def encode_pgm(labels: np.ndarray) -> bytes:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    h, w = labels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + labels.tobytes()


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror})") from exc


def write_ppm(path, image: np.ndarray) -> None:
    _write_bytes(Path(path), encode_ppm(image))


def write_pgm(path, labels: np.ndarray) -> None:
    _write_bytes(Path(path), encode_pgm(labels))


# ---------------------------------------------------------------- synthetic shapes

SHAPES = ("circle", "square", "triangle", "diamond", "cross")
PATTERNS = ("solid", "hstripes", "vstripes", "checker")
PALETTE = ((220, 60, 60), (60, 200, 80), (70, 90, 230), (230, 200, 50))


def class_style(c: int) -> tuple[str, str, tuple[int, int, int]]:
    """Shape, fill pattern and base colour of foreground class ``c`` (c >= 1).

    Shapes cycle with period 5 and colours with period 4, so (shape, colour)
    pairs are unique for the first 20 classes while some classes share a colour
    (class 5 is a cross in class 1's colour). The pattern changes every 5 classes.
    """
    k = c - 1
    return SHAPES[k % len(SHAPES)], PATTERNS[(k // len(SHAPES)) % len(PATTERNS)], PALETTE[k % len(PALETTE)]


def class_names(num_classes: int) -> list[str]:
    names = ["background"]
    for c in range(1, num_classes):
        shape, pattern, _ = class_style(c)
        names.append(f"{pattern}-{shape}-{c}")
    return names


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 6
    images: int = 500
    size: int = 64
    shapes_per_image: tuple[int, int] = (1, 3)
    seed: int = 0
    class_frequency_skew: float = 0.5

    def validate(self) -> None:
        if self.num_classes < 3:
            raise ParameterError(f"need at least 3 classes, got {self.num_classes}")
        if self.num_classes > 255:
            raise ParameterError("class ids must fit below the ignore index 255")
        if self.size < DOWNSAMPLE or self.size % DOWNSAMPLE:
            raise ParameterError(f"size must be a positive multiple of {DOWNSAMPLE}, got {self.size}")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ParameterError(f"bad shapes_per_image range {self.shapes_per_image}")
        if not 0 <= self.class_frequency_skew < 1:
            raise ParameterError(f"class_frequency_skew must lie in [0, 1), got {self.class_frequency_skew}")
        if self.images < 0:
            raise ParameterError("images must be >= 0")
        if 0 < self.images * hi < self.num_classes - 1:
            raise ParameterError("too few images/shapes for every class to appear")

    def class_probs(self) -> np.ndarray:
        w = (1.0 - self.class_frequency_skew) ** np.arange(self.num_classes - 1)
        return w / w.sum()


@dataclass(frozen=True)
class Shape:
    cls: int
    kind: str
    cy: float
    cx: float
    extent: float  # radius / half-size, chosen so every kind has the same area


def _extent_for_area(kind: str, area: float) -> float:
    if kind == "circle":
        return math.sqrt(area / math.pi)
    if kind == "square":
        return math.sqrt(area) / 2
    if kind == "diamond":
        return math.sqrt(area / 2)
    if kind == "triangle":
        return math.sqrt(2 * area) / 2  # half of base == half of height
    if kind == "cross":
        return math.sqrt(9 * area / 5) / 2
    raise ParameterError(f"unknown shape {kind!r}")


def shape_mask(shape: Shape, size: int) -> np.ndarray:
    """Boolean coverage of ``shape`` on a size x size grid, sampled at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - shape.cy, xx - shape.cx
    r = shape.extent
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape.kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape.kind == "triangle":
        # apex at top, base at bottom, height == base == 2r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if shape.kind == "cross":
        arm = r / 3
        return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))
    raise ParameterError(f"unknown shape {shape.kind!r}")


def _texture(pattern: str, color, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if pattern == "solid":
        on = np.ones((size, size), bool)
    elif pattern == "hstripes":
        on = (yy // 2) % 2 == 0
    elif pattern == "vstripes":
        on = (xx // 2) % 2 == 0
    else:
        on = ((yy // 2) + (xx // 2)) % 2 == 0
    base = np.asarray(color, np.float64)
    return np.where(on[..., None], base, base * 0.45)


def render_sample(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[Shape]]:
    """One image (uint8 H x W x 3), its label map (uint8 H x W) and the shapes drawn.

    Shapes are painted in order; later shapes occlude earlier ones.
    """
    S = spec.size
    level = rng.uniform(40, 90)
    image = level + rng.normal(0, 10, size=(S, S, 3))
    labels = np.zeros((S, S), np.uint8)
    probs = spec.class_probs()
    lo, hi = spec.shapes_per_image
    n = int(rng.integers(lo, hi + 1))
    shapes = []
    for _ in range(n):
        cls = int(rng.choice(len(probs), p=probs)) + 1
        kind, pattern, color = class_style(cls)
        side = rng.uniform(S / 6, S / 3)
        shape = Shape(cls, kind, float(rng.uniform(0, S)), float(rng.uniform(0, S)), _extent_for_area(kind, side * side))
        mask = shape_mask(shape, S)
        tex = _texture(pattern, color, S) + rng.normal(0, 8, size=(S, S, 3))
        image[mask] = tex[mask]
        labels[mask] = cls
        shapes.append(shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), labels, shapes


def generate_arrays(spec: SyntheticSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Render the whole dataset in memory.

    Image i uses the sub-stream (seed, attempt, i); the attempt counter is bumped
    until every foreground class appears somewhere.
    """
    spec.validate()
    if spec.images == 0:
        return []
    for attempt in range(1000):
        samples = []
        seen = np.zeros(spec.num_classes, bool)
        for i in range(spec.images):
            rng = np.random.default_rng([spec.seed, attempt, i])
            image, labels, _ = render_sample(spec, rng)
            samples.append((image, labels))
            seen[np.unique(labels)] = True
        if seen[1:].all():
            return samples
    raise DataError("could not cover every class; increase images or lower the skew")


def presence_mask(labels: np.ndarray) -> int:
    mask = 0
    for c in np.unique(labels):
        if c != IGNORE_INDEX:
            mask |= 1 << int(c)
    return mask


def mask_to_classes(mask: int) -> frozenset[int]:
    return frozenset(i for i in range(mask.bit_length()) if mask >> i & 1)


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class Record:
    id: str
    image: str
    label: str
    mask: int

    @property
    def classes(self) -> frozenset[int]:
        return mask_to_classes(self.mask)


class Manifest:
    """Records plus the directory their relative paths resolve against."""

    def __init__(self, root, records: Sequence[Record], class_names: Sequence[str]):
        self.root = Path(root)
        self.records = list(records)
        self.class_names = list(class_names)
        self._by_id = {r.id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def record(self, sample_id: str) -> Record:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise DataError(f"unknown sample id {sample_id!r}") from None

    def presence(self) -> dict[str, frozenset[int]]:
        return {r.id: r.classes for r in self.records}

    def pixel_counts(self, ids: Sequence[str] | None = None) -> np.ndarray:
        counts = np.zeros(self.num_classes, np.int64)
        for sid in ids if ids is not None else self.ids:
            _, labels = load_sample(self, sid)
            counts += np.bincount(labels[labels != IGNORE_INDEX].ravel(), minlength=self.num_classes)[: self.num_classes]
        return counts


MANIFEST_NAME = "manifest.tsv"
CLASSES_NAME = "classes.txt"


def write_manifest(root, records: Sequence[Record], names: Sequence[str]) -> Path:
    root = Path(root)
    lines = "".join(f"{r.id}\t{r.image}\t{r.label}\t{r.mask:x}\n" for r in records)
    _write_bytes(root / MANIFEST_NAME, lines.encode("utf-8"))
    _write_bytes(root / CLASSES_NAME, "".join(f"{n}\n" for n in names).encode("utf-8"))
    return root / MANIFEST_NAME


def read_manifest(path, strict: bool = False) -> Manifest:
    """Load ``manifest.tsv`` (path may be the file or its directory).

    Class names come from a sibling ``classes.txt`` when present. With
    ``strict`` every bitmask is checked against its label file.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        try:
            mask = int(parts[3], 16)
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad hex bitmask {parts[3]!r}") from None
        records.append(Record(parts[0], parts[1], parts[2], mask))
    names_path = root / CLASSES_NAME
    if names_path.exists():
        names = [n for n in names_path.read_text(encoding="utf-8").splitlines() if n]
    else:
        top = max((r.mask.bit_length() for r in records), default=1)
        names = [f"c{i}" for i in range(max(top, 1))]
    manifest = Manifest(root, records, names)
    if strict:
        for r in records:
            _, labels = load_sample(manifest, r.id)
            if presence_mask(labels) != r.mask:
                raise DataError(f"{r.id}: bitmask {r.mask:x} disagrees with label file ({presence_mask(labels):x})")
    return manifest


def load_sample(manifest: Manifest, sample_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Image as float32 H x W x 3 in [0, 1] and the raw uint8 label map."""
    r = manifest.record(sample_id)
    image = read_ppm(manifest.root / r.image)
    labels = read_pgm(manifest.root / r.label)
    if image.shape[:2] != labels.shape:
        raise DataError(f"{r.id}: image {image.shape[:2]} and labels {labels.shape} differ in size")
    return image.astype(np.float32) / np.float32(255), labels


def generate(spec: SyntheticSpec, out_dir) -> Manifest:
    """Render the dataset and write images, labels, manifest and class names."""
    spec.validate()
    out = Path(out_dir)
    samples = generate_arrays(spec)
    names = class_names(spec.num_classes)
    records = []
    for i, (image, labels) in enumerate(samples):
        sid = f"{i:06d}"
        rec = Record(sid, f"images/{sid}.ppm", f"labels/{sid}.pgm", presence_mask(labels))
        write_ppm(out / rec.image, image)
        write_pgm(out / rec.label, labels)
        records.append(rec)
    write_manifest(out, records, names)
    return Manifest(out, records, names)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"KDSG"
CKPT_VERSION = 1


def encode_checkpoint(model: SegModel) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<III", CKPT_VERSION, model.num_classes, len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(model: SegModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    _write_bytes(tmp, encode_checkpoint(model))
    os.replace(tmp, path)


def decode_checkpoint(buf: bytes, source="<bytes>") -> SegModel:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        chunk = buf[pos:pos + n]
        if len(chunk) != n:
            raise TruncatedCheckpointError(f"{source}: truncated while reading {what}")
        pos += n
        return chunk

    version, num_classes, count = struct.unpack("<III", take(12, "header"))
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(take(nbytes, f"{name} data"), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after the last tensor")
    return SegModel.from_params(num_classes, arrays)


def load_checkpoint(path) -> SegModel:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror})") from exc
    return decode_checkpoint(buf, path)
