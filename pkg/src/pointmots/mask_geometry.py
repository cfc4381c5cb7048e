"""Run-length encoded instance masks, mask IoU and box geometry.

Masks use COCO-style uncompressed RLE: runs are counted over pixels in
column-major order, alternating zeros and ones and always starting with a
(possibly empty) zero-run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyMask, MalformedRle


@dataclass(frozen=True)
class BinaryMask:
    height: int
    width: int
    counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])

    def validate(self) -> None:
        if any(c < 0 for c in self.counts):
            raise MalformedRle("negative run length")
        if sum(self.counts) != self.height * self.width:
            raise MalformedRle(
                f"runs sum to {sum(self.counts)}, expected {self.height * self.width}"
            )

    def one_runs(self) -> list:
        """Half-open ``(start, end)`` intervals of foreground pixels in column-major order."""
        runs = []
        pos = 0
        for i, c in enumerate(self.counts):
            if i % 2 == 1 and c > 0:
                runs.append((pos, pos + c))
            pos += c
        return runs

    def to_dense(self) -> np.ndarray:
        return rle_decode(self)

    def format_counts(self) -> str:
        return ",".join(str(c) for c in self.counts)


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    def contains(self, other: "BBox") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and self.x1 >= other.x1
            and self.y1 >= other.y1
        )


@dataclass(frozen=True)
class InstanceObservation:
    frame_index: int
    class_id: int
    mask: BinaryMask
    track_id: Optional[int] = None


def rle_encode(dense) -> BinaryMask:
    dense = np.asarray(dense)
    if dense.ndim != 2 or dense.shape[0] < 1 or dense.shape[1] < 1:
        raise DimensionMismatch(f"expected a non-empty 2D bitmap, got shape {dense.shape}")
    h, w = dense.shape
    flat = (dense.ravel(order="F") != 0).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return BinaryMask(h, w, tuple(counts))


def rle_decode(mask: BinaryMask) -> np.ndarray:
    mask.validate()
    counts = np.asarray(mask.counts, dtype=np.int64)
    values = (np.arange(counts.size) % 2).astype(np.uint8)
    flat = np.repeat(values, counts)
    return flat.reshape((mask.height, mask.width), order="F")


def _check_dims(a: BinaryMask, b: BinaryMask) -> None:
    if (a.height, a.width) != (b.height, b.width):
        raise DimensionMismatch(
            f"mask sizes differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )


def intersection_area(a: BinaryMask, b: BinaryMask) -> int:
    _check_dims(a, b)
    ra, rb = a.one_runs(), b.one_runs()
    i = j = 0
    inter = 0
    while i < len(ra) and j < len(rb):
        s = max(ra[i][0], rb[j][0])
        e = min(ra[i][1], rb[j][1])
        if e > s:
            inter += e - s
        if ra[i][1] <= rb[j][1]:
            i += 1
        else:
            j += 1
    return inter


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union == 0:
        raise EmptyMask("IoU of two empty masks is undefined")
    return inter / union


def tight_bbox(mask: BinaryMask) -> BBox:
    runs = mask.one_runs()
    if not runs:
        raise EmptyMask("mask has no foreground pixels")
    h = mask.height
    x0 = min(s // h for s, _ in runs)
    x1 = max((e - 1) // h for _, e in runs) + 1
    y0, y1 = h, 0
    for s, e in runs:
        if s // h != (e - 1) // h:
            # run crosses a column boundary, so it touches both row 0 and row h-1
            y0, y1 = 0, h
            break
        y0 = min(y0, s % h)
        y1 = max(y1, (e - 1) % h + 1)
    return BBox(x0, y0, x1, y1)


def enlarge_bbox(b: BBox, k: float, width: int, height: int) -> BBox:
    """Grow ``b`` by ``k`` times its width on the left/right and ``k`` times its
    height on the top/bottom, rounding outward, then clip to the image."""
    if k < 0:
        raise ValueError("k must be non-negative")
    dx = k * b.width
    dy = k * b.height
    x0 = max(0, math.floor(b.x0 - dx))
    y0 = max(0, math.floor(b.y0 - dy))
    x1 = min(width, math.ceil(b.x1 + dx))
    y1 = min(height, math.ceil(b.y1 + dy))
    return BBox(x0, y0, x1, y1)


def crop_mask(mask: BinaryMask, box: BBox) -> np.ndarray:
    return rle_decode(mask)[box.y0:box.y1, box.x0:box.x1]


# -- mask line files ---------------------------------------------------------

def format_mask_line(obs: InstanceObservation) -> str:
    tid = -1 if obs.track_id is None else obs.track_id
    m = obs.mask
    return f"{obs.frame_index} {tid} {obs.class_id} {m.height} {m.width} {m.format_counts()}"


def parse_mask_line(line: str) -> InstanceObservation:
    parts = line.split()
    if len(parts) != 6:
        raise MalformedRle(f"expected 6 fields, got {len(parts)}: {line!r}")
    frame, tid, cls, h, w = (int(p) for p in parts[:5])
    counts = tuple(int(c) for c in parts[5].split(","))
    mask = BinaryMask(h, w, counts)
    mask.validate()
    return InstanceObservation(frame, cls, mask, None if tid == -1 else tid)


def write_mask_lines(path, observations: Iterable[InstanceObservation]) -> None:
    lines = [format_mask_line(o) + "\n" for o in observations]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_mask_lines(path) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(parse_mask_line(line))
    return out


def group_by_frame(observations: Sequence[InstanceObservation]) -> dict:
    frames: dict = {}
    for o in observations:
        frames.setdefault(o.frame_index, []).append(o)
    return frames
