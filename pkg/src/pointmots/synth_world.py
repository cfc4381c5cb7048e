"""Deterministic synthetic MOTS sequences.

Textured convex shapes (ellipses, rectangles, triangles) move linearly over a
noisy background. Each object has a fixed depth; nearer objects hide farther
ones, so the emitted masks are the visible parts and never overlap. Objects
that leave the image are replaced by new ones entering from a border.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .mask_geometry import (InstanceObservation, group_by_frame, read_mask_lines, rle_decode,
                            rle_encode, tight_bbox, write_mask_lines)
from .pointcloud import read_class_map, write_class_map

BACKGROUND_CLASS = 1
_SHAPES = ("ellipse", "rect", "triangle")


@dataclass(frozen=True)
class WorldConfig:
    width: int = 160
    height: int = 120
    frames: int = 60
    min_objects: int = 6
    max_objects: int = 12
    num_classes: int = 3
    speed_min: float = 3.0
    speed_max: float = 8.0
    size_min: float = 10.0
    size_max: float = 26.0
    palette_size: int = 24
    texture_amplitude: float = 30.0
    pixel_noise: float = 6.0
    min_visible_pixels: int = 8
    allow_occlusion: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.num_classes < 2:
            raise ValueError("num_classes counts the background and must be >= 2")


@dataclass
class _Object:
    track_id: int
    shape: str
    class_id: int
    color: np.ndarray
    cx: float
    cy: float
    vx: float
    vy: float
    rx: float
    ry: float
    angle: float
    depth: float
    stripe_freq: float
    stripe_angle: float


@dataclass
class GroundTruthSequence:
    name: str
    width: int
    height: int
    num_classes: int
    n_frames: int
    instances: list  # InstanceObservation with track ids
    images: Optional[list] = None
    class_maps: Optional[list] = None
    root: Optional[Path] = None
    meta: dict = field(default_factory=dict)

    def image(self, t: int) -> np.ndarray:
        if self.images is not None:
            return self.images[t]
        return read_ppm(self.root / f"image_{t:06d}.ppm")

    def class_map(self, t: int) -> np.ndarray:
        if self.class_maps is not None:
            return self.class_maps[t]
        return read_class_map(self.root / f"class_{t:06d}.raw", self.height, self.width)

    def frames(self):
        """Yield ``(image, class_map, observations)`` for every frame."""
        by_frame = group_by_frame(self.instances)
        for t in range(self.n_frames):
            yield self.image(t), self.class_map(t), by_frame.get(t, [])


def make_palette(n: int) -> np.ndarray:
    cols = []
    for i in range(n):
        hue = (i * 0.61803398875) % 1.0
        sat = 0.55 + 0.4 * ((i // 3) % 2)
        val = 0.55 + 0.4 * ((i // 2) % 2)
        cols.append(colorsys.hsv_to_rgb(hue, sat, val))
    return np.round(np.array(cols) * 255.0)


def _spawn(rng, cfg: WorldConfig, tid: int, color, lane=None, at_border=True) -> _Object:
    size = rng.uniform(cfg.size_min, cfg.size_max)
    aspect = rng.uniform(0.6, 1.4)
    rx, ry = size / 2 * aspect, size / 2 / aspect
    speed = rng.uniform(cfg.speed_min, cfg.speed_max)
    if lane is not None:
        lo, hi = lane
        ry = min(ry, (hi - lo) / 2 - 1)
        rx = min(rx, 2 * ry + 2)
        cy = (lo + hi) / 2
        direction = 1.0 if rng.random() < 0.5 else -1.0
        cx = (-rx if direction > 0 else cfg.width + rx) if at_border else rng.uniform(rx, cfg.width - rx)
        vx, vy = direction * speed, 0.0
        angle = 0.0
    else:
        theta = rng.uniform(0, 2 * np.pi)
        if at_border:
            side = rng.integers(4)
            if side == 0:
                cx, cy = -rx, rng.uniform(0, cfg.height)
            elif side == 1:
                cx, cy = cfg.width + rx, rng.uniform(0, cfg.height)
            elif side == 2:
                cx, cy = rng.uniform(0, cfg.width), -ry
            else:
                cx, cy = rng.uniform(0, cfg.width), cfg.height + ry
            # head roughly towards the image centre
            to_c = np.arctan2(cfg.height / 2 - cy, cfg.width / 2 - cx)
            theta = to_c + rng.uniform(-0.6, 0.6)
        else:
            cx, cy = rng.uniform(0, cfg.width), rng.uniform(0, cfg.height)
        vx, vy = speed * np.cos(theta), speed * np.sin(theta)
        angle = rng.uniform(0, np.pi)
    return _Object(
        track_id=tid,
        shape=_SHAPES[rng.integers(len(_SHAPES))],
        class_id=int(rng.integers(2, cfg.num_classes + 1)),
        color=color,
        cx=cx, cy=cy, vx=vx, vy=vy, rx=rx, ry=ry,
        angle=angle if lane is None else 0.0,
        depth=rng.random(),
        stripe_freq=rng.uniform(0.3, 0.9),
        stripe_angle=rng.uniform(0, np.pi),
    )


def _shape_mask(o: _Object, xs, ys) -> np.ndarray:
    dx, dy = xs - o.cx, ys - o.cy
    c, s = np.cos(o.angle), np.sin(o.angle)
    lx = (c * dx + s * dy) / o.rx
    ly = (-s * dx + c * dy) / o.ry
    if o.shape == "ellipse":
        return lx * lx + ly * ly <= 1.0
    if o.shape == "rect":
        return (np.abs(lx) <= 1.0) & (np.abs(ly) <= 1.0)
    # isoceles triangle pointing up in local frame
    return (ly <= 1.0) & (ly >= -1.0 + 2.0 * np.abs(lx))


def _outside(o: _Object, cfg: WorldConfig) -> bool:
    r = max(o.rx, o.ry) + 1
    return (o.cx < -r or o.cx > cfg.width + r or o.cy < -r or o.cy > cfg.height + r)


def _lanes(cfg: WorldConfig, n: int) -> list:
    edges = np.linspace(0, cfg.height, n + 1)
    return [(edges[i], edges[i + 1]) for i in range(n)]


def gen_sequence(cfg: WorldConfig, name: str = "seq") -> GroundTruthSequence:
    rng = np.random.default_rng(cfg.rng_seed)
    palette = make_palette(cfg.palette_size)
    n_target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    lanes = None if cfg.allow_occlusion else _lanes(cfg, n_target)
    color_order = list(rng.permutation(cfg.palette_size))
    next_color = 0
    next_id = 1
    objects: list = []
    slot_of: dict = {}

    def new_object(slot, at_border):
        nonlocal next_id, next_color
        color = palette[color_order[next_color % cfg.palette_size]]
        next_color += 1
        lane = lanes[slot] if lanes is not None else None
        o = _spawn(rng, cfg, next_id, color, lane=lane, at_border=at_border)
        slot_of[next_id] = slot
        next_id += 1
        return o

    for slot in range(n_target):
        objects.append(new_object(slot, at_border=False))

    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64) + 0.5
    bg_base = 90.0 + 25.0 * np.sin(xs / 9.0) * np.cos(ys / 13.0)
    images, class_maps, instances = [], [], []
    for t in range(cfg.frames):
        label = np.full((cfg.height, cfg.width), -1, dtype=np.int64)
        for idx in sorted(range(len(objects)), key=lambda i: -objects[i].depth):
            label[_shape_mask(objects[idx], xs, ys)] = idx
        noise = rng.normal(0.0, cfg.pixel_noise, size=(cfg.height, cfg.width, 3))
        img = np.repeat(bg_base[..., None], 3, axis=2) + noise
        cls = np.full((cfg.height, cfg.width), BACKGROUND_CLASS, dtype=np.uint8)
        for idx, o in enumerate(objects):
            sel = label == idx
            if not sel.any():
                continue
            u = (xs[sel] - o.cx) * np.cos(o.stripe_angle) + (ys[sel] - o.cy) * np.sin(o.stripe_angle)
            tex = cfg.texture_amplitude * np.sin(o.stripe_freq * u)
            img[sel] = o.color[None, :] + tex[:, None] + noise[sel]
            cls[sel] = o.class_id
            if sel.sum() >= cfg.min_visible_pixels:
                instances.append(InstanceObservation(t, o.class_id, rle_encode(sel), o.track_id))
        images.append(np.clip(np.round(img), 0, 255).astype(np.uint8))
        class_maps.append(cls)

        for o in objects:
            o.cx += o.vx
            o.cy += o.vy
        survivors = []
        for o in objects:
            if _outside(o, cfg):
                survivors.append(new_object(slot_of[o.track_id], at_border=True))
            else:
                survivors.append(o)
        objects = survivors

    n_inst = len(instances)
    meta = {
        "name": name,
        "width": cfg.width,
        "height": cfg.height,
        "frames": cfg.frames,
        "num_classes": cfg.num_classes,
        "instances": n_inst,
        "tracks": len({o.track_id for o in instances}),
        "density": n_inst / cfg.frames,
        "config": asdict(cfg),
    }
    return GroundTruthSequence(name, cfg.width, cfg.height, cfg.num_classes, cfg.frames,
                               instances, images, class_maps, meta=meta)


# -- files -------------------------------------------------------------------

def write_ppm(path, image) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only binary 8-bit PPM is supported")
    w, h = int(fields[1]), int(fields[2])
    pixels = data[pos + 1:pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def write_sequence(seq: GroundTruthSequence, root) -> Path:
    d = Path(root) / seq.name
    d.mkdir(parents=True, exist_ok=True)
    for t in range(seq.n_frames):
        write_ppm(d / f"image_{t:06d}.ppm", seq.image(t))
        write_class_map(d / f"class_{t:06d}.raw", seq.class_map(t))
    write_mask_lines(d / "instances.txt", seq.instances)
    (d / "meta.json").write_text(json.dumps(seq.meta, indent=2, sort_keys=True) + "\n")
    return d


def load_sequence(path, in_memory: bool = False) -> GroundTruthSequence:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    seq = GroundTruthSequence(
        name=meta.get("name", d.name), width=meta["width"], height=meta["height"],
        num_classes=meta["num_classes"], n_frames=meta["frames"],
        instances=read_mask_lines(d / "instances.txt"), root=d, meta=meta,
    )
    if in_memory:
        seq.images = [seq.image(t) for t in range(seq.n_frames)]
        seq.class_maps = [seq.class_map(t) for t in range(seq.n_frames)]
    return seq


def list_sequences(root) -> list:
    return sorted(p for p in Path(root).iterdir() if (p / "meta.json").is_file())


def sequence_config(cfg: WorldConfig, index: int) -> WorldConfig:
    """Config of the ``index``-th sequence of a dataset seeded by ``cfg.rng_seed``."""
    seed = int(np.random.SeedSequence([cfg.rng_seed, index]).generate_state(1)[0])
    return WorldConfig(**{**asdict(cfg), "rng_seed": seed})


def gen_dataset(root, n_sequences: int, cfg: WorldConfig, prefix: str = "seq",
                start_index: int = 0) -> list:
    paths = []
    for i in range(start_index, start_index + n_sequences):
        seq = gen_sequence(sequence_config(cfg, i), name=f"{prefix}{i:04d}")
        paths.append(write_sequence(seq, root))
    return paths


def validate_sequence(seq: GroundTruthSequence) -> list:
    problems = []
    track_class: dict = {}
    by_frame = group_by_frame(seq.instances)
    for f in by_frame:
        if not 0 <= f < seq.n_frames:
            problems.append(f"{seq.name}: instance in frame {f} outside [0, {seq.n_frames})")
    for t in range(seq.n_frames):
        try:
            img = seq.image(t)
            cls = seq.class_map(t)
        except (OSError, ValueError) as exc:
            problems.append(f"{seq.name}: frame {t}: {exc}")
            continue
        if img.shape != (seq.height, seq.width, 3):
            problems.append(f"{seq.name}: frame {t}: image shape {img.shape}")
        cover = np.zeros((seq.height, seq.width), dtype=np.int64)
        seen_ids = set()
        for o in by_frame.get(t, []):
            m = o.mask
            if (m.height, m.width) != (seq.height, seq.width):
                problems.append(f"{seq.name}: frame {t} track {o.track_id}: mask size {m.height}x{m.width}")
                continue
            if m.area == 0:
                problems.append(f"{seq.name}: frame {t} track {o.track_id}: empty mask")
                continue
            if o.track_id is None:
                problems.append(f"{seq.name}: frame {t}: instance without track id")
            elif o.track_id in seen_ids:
                problems.append(f"{seq.name}: frame {t}: track {o.track_id} appears twice")
            seen_ids.add(o.track_id)
            if not 1 <= o.class_id <= seq.num_classes:
                problems.append(f"{seq.name}: frame {t} track {o.track_id}: class {o.class_id} out of range")
            prev = track_class.setdefault(o.track_id, o.class_id)
            if prev != o.class_id:
                problems.append(f"{seq.name}: track {o.track_id} changes class {prev} -> {o.class_id} at frame {t}")
            dense = rle_decode(m).astype(bool)
            cover += dense
            if not (cls[dense] == o.class_id).all():
                problems.append(f"{seq.name}: frame {t} track {o.track_id}: class map disagrees with mask")
        if (cover > 1).any():
            problems.append(f"{seq.name}: frame {t}: overlapping instance masks")
    return problems


def validate_dataset(root) -> list:
    """Check every sequence under ``root``; returns a list of violations."""
    root = Path(root)
    seqs = list_sequences(root)
    if not seqs:
        return [f"{root}: no sequences found"]
    problems = []
    for p in seqs:
        try:
            seq = load_sequence(p)
        except Exception as exc:  # report unreadable sequences, keep going
            problems.append(f"{p.name}: cannot load: {exc}")
            continue
        problems.extend(validate_sequence(seq))
    return problems


def boxes_disjoint(observations) -> bool:
    boxes = [tight_bbox(o.mask) for o in observations]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            a, b = boxes[i], boxes[j]
            if a.x0 < b.x1 and b.x0 < a.x1 and a.y0 < b.y1 and b.y0 < a.y1:
                return False
    return True
