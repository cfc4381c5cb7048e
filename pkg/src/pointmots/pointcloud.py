"""Turn an instance segment and its surroundings into two 2D point clouds.

The foreground cloud is drawn from the segment pixels, the environment cloud
from the enlarged crop around the segment with the segment itself removed.
Every point carries an offset from the foreground center and its RGB color;
environment points additionally carry a one-hot semantic class. The crop
position is summarized by a 64-dim sinusoidal embedding.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ClassOutOfRange, DimensionMismatch, EmptyMask
from .mask_geometry import BBox, InstanceObservation, enlarge_bbox, rle_decode, tight_bbox

POSITION_DIM = 64
_FREQS_PER_COORD = 8
_POSITION_BASE = 10000.0


@dataclass(frozen=True)
class SamplerConfig:
    n_fg: int = 1000
    n_env: int = 500
    k: float = 0.2
    num_classes: int = 3
    rng_seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        if self.n_fg < 1 or self.n_env < 1:
            raise ValueError("sample counts must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes counts the background and must be >= 2")


@dataclass
class InstanceCrop:
    """Pixels of the enlarged box around one instance, cut from the full frame."""

    image: np.ndarray  # (h, w, 3) uint8
    class_map: np.ndarray  # (h, w) uint8
    segment: np.ndarray  # (h, w) bool
    crop_box: BBox
    tight_box: BBox
    image_width: int
    image_height: int


@dataclass
class PointCloudPair:
    fg_uv: np.ndarray  # (N_F, 2) pixel coords, u = column, v = row
    fg_rgb: np.ndarray  # (N_F, 3)
    env_uv: np.ndarray  # (N_E, 2)
    env_rgb: np.ndarray  # (N_E, 3)
    env_class: np.ndarray  # (N_E,)
    center: np.ndarray  # (2,)
    crop_box: BBox
    tight_box: BBox
    image_width: int
    image_height: int
    env_empty: bool = False


@dataclass
class ModalityTensors:
    fg_features: np.ndarray  # (N_F, 5): offset ++ color
    env_features: np.ndarray  # (N_E, 5 + Z): offset ++ color ++ one-hot class
    position: np.ndarray  # (64,)


def make_crop(image, class_map, obs: InstanceObservation, k: float = 0.2) -> InstanceCrop:
    image = np.asarray(image)
    class_map = np.asarray(class_map)
    m = obs.mask
    if image.shape[:2] != (m.height, m.width) or class_map.shape != (m.height, m.width):
        raise DimensionMismatch(
            f"image {image.shape[:2]}, class map {class_map.shape}, mask {(m.height, m.width)}"
        )
    tight = tight_bbox(m)
    box = enlarge_bbox(tight, k, m.width, m.height)
    seg = rle_decode(m)[box.y0:box.y1, box.x0:box.x1].astype(bool)
    return InstanceCrop(
        image=image[box.y0:box.y1, box.x0:box.x1].copy(),
        class_map=class_map[box.y0:box.y1, box.x0:box.x1].copy(),
        segment=seg,
        crop_box=box,
        tight_box=tight,
        image_width=m.width,
        image_height=m.height,
    )


def sample_crop(crop: InstanceCrop, cfg: SamplerConfig, rng: np.random.Generator) -> PointCloudPair:
    """Uniform sampling with replacement of ``cfg.n_fg`` segment pixels and
    ``cfg.n_env`` off-segment pixels of the crop."""
    seg = crop.segment
    rows, cols = np.nonzero(seg)
    if rows.size == 0:
        raise EmptyMask("instance segment is empty")
    pick = rng.integers(0, rows.size, size=cfg.n_fg)
    fr, fc = rows[pick], cols[pick]

    er_all, ec_all = np.nonzero(~seg)
    env_empty = er_all.size == 0
    if env_empty:
        # sentinel: the crop's top-left pixel, repeated
        er = np.zeros(cfg.n_env, dtype=np.intp)
        ec = np.zeros(cfg.n_env, dtype=np.intp)
    else:
        pick = rng.integers(0, er_all.size, size=cfg.n_env)
        er, ec = er_all[pick], ec_all[pick]

    x0, y0 = crop.crop_box.x0, crop.crop_box.y0
    fg_uv = np.stack([fc + x0, fr + y0], axis=1).astype(np.float64)
    env_uv = np.stack([ec + x0, er + y0], axis=1).astype(np.float64)
    return PointCloudPair(
        fg_uv=fg_uv,
        fg_rgb=crop.image[fr, fc].astype(np.float64),
        env_uv=env_uv,
        env_rgb=crop.image[er, ec].astype(np.float64),
        env_class=crop.class_map[er, ec].astype(np.int64),
        center=fg_uv.mean(axis=0),
        crop_box=crop.crop_box,
        tight_box=crop.tight_box,
        image_width=crop.image_width,
        image_height=crop.image_height,
        env_empty=env_empty,
    )


def sample_points(image, class_map, obs: InstanceObservation, cfg: SamplerConfig,
                  rng: Optional[np.random.Generator] = None) -> PointCloudPair:
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    return sample_crop(make_crop(image, class_map, obs, cfg.k), cfg, rng)


def encode_offsets(pc: PointCloudPair, normalize: bool = True):
    """Offsets of foreground and environment points from the foreground center.

    With ``normalize`` the offsets are divided by the diagonal of the
    enlarged crop.
    """
    fg = pc.fg_uv - pc.center
    env = pc.env_uv - pc.center
    if normalize:
        diag = float(np.hypot(pc.crop_box.width, pc.crop_box.height))
        fg = fg / diag
        env = env / diag
    return fg, env


def encode_colors(pc: PointCloudPair, normalize: bool = True):
    if normalize:
        return pc.fg_rgb / 255.0, pc.env_rgb / 255.0
    return pc.fg_rgb.copy(), pc.env_rgb.copy()


def encode_category(pc: PointCloudPair, num_classes: int) -> np.ndarray:
    cls = np.asarray(pc.env_class)
    if cls.size and (cls.min() < 1 or cls.max() > num_classes):
        raise ClassOutOfRange(
            f"class ids must lie in [1, {num_classes}], got [{cls.min()}, {cls.max()}]"
        )
    onehot = np.zeros((cls.size, num_classes))
    onehot[np.arange(cls.size), cls - 1] = 1.0
    return onehot


def encode_position(box: BBox, width: int, height: int) -> np.ndarray:
    """Sinusoidal embedding of the box corners normalized by the image size.

    Each of the 4 normalized coordinates yields 16 values
    ``sin(p * f_j), cos(p * f_j)`` for ``f_j = 10000 ** (-2j / 16)``, ``j = 0..7``.
    """
    coords = np.array([box.x0 / width, box.y0 / height, box.x1 / width, box.y1 / height])
    j = np.arange(_FREQS_PER_COORD)
    freqs = _POSITION_BASE ** (-2.0 * j / (2 * _FREQS_PER_COORD))
    phase = coords[:, None] * freqs[None, :]
    out = np.empty((4, 2 * _FREQS_PER_COORD))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out.ravel()


def encode_modalities(pc: PointCloudPair, num_classes: int, normalize: bool = True) -> ModalityTensors:
    off_f, off_e = encode_offsets(pc, normalize)
    col_f, col_e = encode_colors(pc, normalize)
    onehot = encode_category(pc, num_classes)
    return ModalityTensors(
        fg_features=np.concatenate([off_f, col_f], axis=1),
        env_features=np.concatenate([off_e, col_e, onehot], axis=1),
        position=encode_position(pc.tight_box, pc.image_width, pc.image_height),
    )


def extract_modalities(crop: InstanceCrop, cfg: SamplerConfig, rng: np.random.Generator):
    pc = sample_crop(crop, cfg, rng)
    return pc, encode_modalities(pc, cfg.num_classes, cfg.normalize)


def write_class_map(path, class_map) -> None:
    arr = np.ascontiguousarray(class_map, dtype=np.uint8)
    Path(path).write_bytes(arr.tobytes())


def read_class_map(path, height: int, width: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) != height * width:
        raise DimensionMismatch(f"{path}: {len(data)} bytes, expected {height * width}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()
