"""Darknet annotation I/O, synthetic scenes, grid targets and HFL partitioning."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .detection import ArchConfig, GridTarget

SHAPE_NAMES = ("square", "triangle", "cross", "disc", "diamond")


class AnnotationError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class BoxAnnotation:
    label: int
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        problem = _box_problem(self.label, self.x, self.y, self.w, self.h)
        if problem:
            raise ValueError(problem)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def _box_problem(label, x, y, w, h) -> str | None:
    if label < 0:
        return f"label must be >= 0, got {label}"
    for name, v in (("x", x), ("y", y)):
        if not 0.0 <= v <= 1.0:
            return f"{name}={v} outside [0, 1]"
    for name, v in (("w", w), ("h", h)):
        if not 0.0 < v <= 1.0:
            return f"{name}={v} outside (0, 1]"
    return None


@dataclass
class LabeledSample:
    sample_id: str
    image: np.ndarray
    boxes: list[BoxAnnotation]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabeledSample)
            and self.sample_id == other.sample_id
            and self.boxes == other.boxes
            and np.array_equal(self.image, other.image)
        )

    @property
    def dominant_label(self) -> int:
        labels = [b.label for b in self.boxes]
        return max(sorted(set(labels)), key=labels.count) if labels else 0


@dataclass
class ClientShard:
    client_id: str
    samples: list[LabeledSample]
    class_set: list[str] = field(default_factory=list)

    @property
    def sample_ids(self) -> set[str]:
        return {s.sample_id for s in self.samples}

    def class_histogram(self, C: int) -> list[int]:
        counts = [0] * C
        for s in self.samples:
            for b in s.boxes:
                counts[b.label] += 1
        return counts


def parse_annotation_file(text: str) -> list[BoxAnnotation]:
    """Parse Darknet ``label x y w h`` rows; blank lines are skipped."""
    boxes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise AnnotationError(lineno, f"expected 5 fields, got {len(parts)}")
        try:
            label = int(parts[0])
        except ValueError:
            raise AnnotationError(lineno, f"label {parts[0]!r} is not an integer") from None
        try:
            x, y, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise AnnotationError(lineno, "non-numeric coordinate") from None
        problem = _box_problem(label, x, y, w, h)
        if problem:
            raise AnnotationError(lineno, problem)
        boxes.append(BoxAnnotation(label, x, y, w, h))
    return boxes


def serialize_annotations(boxes: Iterable[BoxAnnotation]) -> str:
    return "\n".join(f"{b.label} {b.x:.6f} {b.y:.6f} {b.w:.6f} {b.h:.6f}" for b in boxes)


@dataclass(frozen=True)
class SceneSpec:
    side: int = 12
    C: int = 2
    max_objects: int = 1

    def __post_init__(self):
        if self.side < 8:
            raise ValueError(f"side must be >= 8, got {self.side}")
        if not 2 <= self.C <= len(SHAPE_NAMES):
            raise ValueError(f"C must be in [2, {len(SHAPE_NAMES)}], got {self.C}")
        if self.max_objects < 1:
            raise ValueError("max_objects must be >= 1")


def shape_mask(label: int, size: int) -> np.ndarray:
    """Boolean ``size x size`` footprint of the primitive drawn for ``label``."""
    r, c = np.mgrid[0:size, 0:size]
    mid = (size - 1) / 2.0
    d2 = (r - mid) ** 2 + (c - mid) ** 2
    kind = SHAPE_NAMES[label]
    if kind == "square":
        mask = np.ones((size, size), dtype=bool)
    elif kind == "disc":
        mask = d2 <= (size / 2.0) ** 2 - 0.25
    elif kind == "cross":
        bar = max(1, size // 3)
        bar += (size - bar) % 2  # bar must share the footprint's parity to stay centred
        half = bar / 2.0
        mask = (np.abs(r - mid) < half) | (np.abs(c - mid) < half)
    elif kind == "triangle":
        mask = c <= r
    else:
        mask = np.abs(r - mid) + np.abs(c - mid) <= size / 2.0
    return mask


def _mask_box(mask: np.ndarray, top: int, left: int, side: int) -> tuple[float, float, float, float]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = top + rows[0], top + rows[-1] + 1
    c0, c1 = left + cols[0], left + cols[-1] + 1
    return ((c0 + c1) / 2 / side, (r0 + r1) / 2 / side, (c1 - c0) / side, (r1 - r0) / side)


def generate_scene(seed: int, spec: SceneSpec, sample_id: str | None = None) -> LabeledSample:
    """Render 1..max_objects non-overlapping shapes onto a noisy background.

    The class index selects the shape (square, triangle, cross, disc, diamond).
    Boxes are the exact pixel extents of each rendered footprint.  Pixel
    values are float32-representable so disk round-trips are lossless.
    """
    return render_scene(seed, spec, sample_id)[0]


def render_scene(
    seed: int, spec: SceneSpec, sample_id: str | None = None
) -> tuple[LabeledSample, list[np.ndarray]]:
    """``generate_scene`` plus one full-image boolean footprint per object."""
    rng = np.random.default_rng(seed)
    side = spec.side
    image = rng.uniform(0.0, 0.25, size=(side, side))
    occupied = np.zeros((side, side), dtype=bool)
    n_obj = int(rng.integers(1, spec.max_objects + 1))
    lo, hi = max(3, side // 3), max(3, side // 2)
    boxes: list[BoxAnnotation] = []
    masks: list[np.ndarray] = []
    for _ in range(n_obj):
        for _attempt in range(30):
            label = int(rng.integers(spec.C))
            size = int(rng.integers(lo, hi + 1))
            top = int(rng.integers(0, side - size + 1))
            left = int(rng.integers(0, side - size + 1))
            if not occupied[top : top + size, left : left + size].any():
                break
        else:
            continue
        mask = shape_mask(label, size)
        region = image[top : top + size, left : left + size]
        region[mask] = rng.uniform(0.75, 1.0)
        occupied[top : top + size, left : left + size] = True
        full = np.zeros((side, side), dtype=bool)
        full[top : top + size, left : left + size] = mask
        masks.append(full)
        # 6 decimals keeps the in-memory box identical to its .lbl round-trip
        x, y, w, h = (float(round(v, 6)) for v in _mask_box(mask, top, left, side))
        boxes.append(BoxAnnotation(label, x, y, w, h))
    image = np.clip(image, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return LabeledSample(sample_id or f"scene-{seed}", image, boxes), masks


def cell_of(x: float, y: float, S: int) -> tuple[int, int]:
    """``(col, row)`` of the cell holding centre ``(x, y)``; 1.0 maps to the last cell."""
    return min(int(math.floor(x * S)), S - 1), min(int(math.floor(y * S)), S - 1)


def encode_grid_target(boxes: Sequence[BoxAnnotation], arch: ArchConfig) -> GridTarget:
    """Ground-truth grid for ``boxes``.

    Slot 0 of the containing cell is responsible.  Box centres are stored as
    offsets inside the cell.  A later box whose centre lands in an already
    used cell overwrites it and bumps ``collisions``.
    """
    S = arch.S
    target = GridTarget.empty(arch)
    for b in boxes:
        if b.label >= arch.C:
            raise ValueError(f"label {b.label} >= C={arch.C}")
        col, row = cell_of(b.x, b.y, S)
        i = row * S + col
        if target.obj[i]:
            target.collisions += 1
            target.cls[i] = 0.0
        target.obj[i] = 1.0
        target.resp[i, 0] = 1.0
        target.box[i, 0] = (b.x * S - col, b.y * S - row, b.w, b.h)
        target.conf[i] = 1.0
        target.cls[i, b.label] = 1.0
    return target


def decode_box(cell: int, slot_values: Sequence[float], S: int) -> tuple[float, float, float, float]:
    """Invert the cell-offset encoding of ``encode_grid_target``."""
    row, col = divmod(cell, S)
    x, y, w, h = slot_values[:4]
    return ((col + x) / S, (row + y) / S, w, h)


@dataclass(frozen=True)
class PartitionMode:
    """``iid`` or ``skew``; skew draws per-client class proportions from Dirichlet(alpha).

    With ``drop_class`` client ``k`` never receives class ``k % C``.
    """

    kind: str = "iid"
    alpha: float = 1.0
    drop_class: bool = False

    @classmethod
    def parse(cls, text: str) -> "PartitionMode":
        parts = text.split(":")
        if parts[0] == "iid" and len(parts) == 1:
            return cls("iid")
        if parts[0] == "skew" and len(parts) in (2, 3):
            drop = len(parts) == 3 and parts[2] == "drop"
            if len(parts) == 3 and not drop:
                raise ValueError(f"bad partition mode {text!r}")
            return cls("skew", float(parts[1]), drop)
        raise ValueError(f"bad partition mode {text!r} (use iid, skew:ALPHA or skew:ALPHA:drop)")


def partition_dataset(
    samples: Sequence[LabeledSample],
    n_clients: int,
    mode: PartitionMode = PartitionMode(),
    seed: int = 0,
    class_set: Sequence[str] | None = None,
    C: int | None = None,
) -> list[ClientShard]:
    """Split ``samples`` into disjoint shards sharing one class set."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not samples:
        raise ValueError("no samples to partition")
    if n_clients > len(samples):
        raise ValueError(f"{n_clients} clients but only {len(samples)} samples")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    C = C or (max(s.dominant_label for s in samples) + 1)
    names = list(class_set) if class_set is not None else list(SHAPE_NAMES[:C])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    buckets: list[list[int]] = [[] for _ in range(n_clients)]

    if mode.kind == "iid":
        for pos, idx in enumerate(order):
            buckets[pos % n_clients].append(int(idx))
    elif mode.kind == "skew":
        if mode.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if math.isinf(mode.alpha) or mode.alpha > 1e8:
            props = np.ones((n_clients, C))
        else:
            props = rng.dirichlet(np.full(C, mode.alpha), size=n_clients)
        if mode.drop_class:
            for k in range(n_clients):
                props[k, k % C] = 0.0
        by_class: list[list[int]] = [[] for _ in range(C)]
        for idx in order:
            by_class[samples[idx].dominant_label].append(int(idx))
        for c, members in enumerate(by_class):
            col = props[:, c]
            if col.sum() <= 0:
                col = np.ones(n_clients)
                if mode.drop_class:
                    col[[k for k in range(n_clients) if k % C == c]] = 0.0
                if col.sum() <= 0:
                    col = np.ones(n_clients)
            cuts = np.round(np.cumsum(col / col.sum()) * len(members)).astype(int)
            start = 0
            for k, stop in enumerate(cuts):
                buckets[k].extend(members[start:stop])
                start = stop
        _fill_empty(buckets, samples, C, mode)
    else:
        raise ValueError(f"unknown partition kind {mode.kind!r}")

    shards = [
        ClientShard(f"client_{k}", [samples[i] for i in sorted(b)], list(names))
        for k, b in enumerate(buckets)
    ]
    check_hfl(shards, samples)
    return shards


def _fill_empty(buckets, samples, C, mode) -> None:
    for k, bucket in enumerate(buckets):
        if bucket:
            continue
        banned = k % C if mode.drop_class else None
        for donor in sorted(range(len(buckets)), key=lambda d: -len(buckets[d])):
            if len(buckets[donor]) < 2:
                continue
            movable = [i for i in buckets[donor] if samples[i].dominant_label != banned]
            if movable:
                buckets[donor].remove(movable[-1])
                bucket.append(movable[-1])
                break


def check_hfl(shards: Sequence[ClientShard], samples: Sequence[LabeledSample] | None = None) -> None:
    """Assert shards share one class set and hold pairwise-disjoint sample ids."""
    if not shards:
        raise ValueError("no shards")
    first = shards[0].class_set
    seen: set[str] = set()
    for shard in shards:
        if shard.class_set != first:
            raise ValueError(f"{shard.client_id} class set differs")
        ids = shard.sample_ids
        if ids & seen:
            raise ValueError(f"{shard.client_id} shares sample ids with another shard")
        seen |= ids
    if samples is not None and seen != {s.sample_id for s in samples}:
        raise ValueError("shards do not cover the input")


# On-disk layout: one directory per shard holding <id>.lbl, <id>.img and
# classes.txt.  .img is little-endian u32 side followed by side*side float32.

def write_image(path: Path, image: np.ndarray) -> None:
    side = image.shape[0]
    if image.shape != (side, side):
        raise ValueError(f"image must be square, got {image.shape}")
    Path(path).write_bytes(struct.pack("<I", side) + image.astype("<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated image")
    (side,) = struct.unpack_from("<I", data)
    if len(data) != 4 + 4 * side * side:
        raise ValueError(f"{path}: expected {4 + 4 * side * side} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=4).reshape(side, side).astype(np.float64)


def write_shard(directory: Path, shard: ClientShard) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "classes.txt").write_text("\n".join(shard.class_set) + "\n", encoding="utf-8")
    for s in shard.samples:
        write_image(directory / f"{s.sample_id}.img", s.image)
        text = serialize_annotations(s.boxes)
        (directory / f"{s.sample_id}.lbl").write_text(text + "\n" if text else "", encoding="utf-8")


def read_shard(directory: Path, client_id: str | None = None) -> ClientShard:
    directory = Path(directory)
    classes_file = directory / "classes.txt"
    class_set = classes_file.read_text(encoding="utf-8").split() if classes_file.exists() else []
    samples = []
    for lbl in sorted(directory.glob("*.lbl")):
        try:
            boxes = parse_annotation_file(lbl.read_text(encoding="utf-8"))
        except AnnotationError as e:
            raise AnnotationError(e.line, f"{lbl.name}: {e}") from None
        samples.append(LabeledSample(lbl.stem, read_image(lbl.with_suffix(".img")), boxes))
    return ClientShard(client_id or directory.name, samples, class_set)
