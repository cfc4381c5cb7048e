"""Temporal consistency loss between a flow-warped previous seed map and the
current one, plus the binary raster format used for seed maps and flows."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile, DimensionMismatch, EmptyMask
from .mask_geometry import BinaryMask, rle_decode

RASTER_MAGIC = b"PMRS"


def warp(prev, flow) -> np.ndarray:
    """Backward bilinear warp: ``out[y, x] = prev(y - dv, x - du)`` with
    ``flow[y, x] = (du, dv)``; samples off the image clamp to the border."""
    prev = np.asarray(prev, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if prev.ndim != 2 or flow.shape != prev.shape + (2,):
        raise DimensionMismatch(f"seed map {prev.shape} vs flow {flow.shape}")
    h, w = prev.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = np.clip(xs - flow[..., 0], 0, w - 1)
    sy = np.clip(ys - flow[..., 1], 0, h - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    top = prev[y0, x0] * (1 - fx) + prev[y0, x1] * fx
    bot = prev[y1, x0] * (1 - fx) + prev[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    # exact copies where the sample lands on a pixel centre
    exact = (fx == 0) & (fy == 0)
    out[exact] = prev[y0[exact], x0[exact]]
    return out


def temporal_consistency_loss(warped, current, fg) -> float:
    """Mean squared difference over the foreground pixels of ``fg`` (a
    :class:`BinaryMask` or a boolean array)."""
    warped = np.asarray(warped, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    sel = rle_decode(fg).astype(bool) if isinstance(fg, BinaryMask) else np.asarray(fg, dtype=bool)
    if warped.shape != current.shape or sel.shape != current.shape:
        raise DimensionMismatch(f"{warped.shape}, {current.shape}, mask {sel.shape}")
    n = int(sel.sum())
    if n == 0:
        raise EmptyMask("foreground mask is empty")
    d = warped[sel] - current[sel]
    return float((d * d).sum() / n)


def write_raster(path, data) -> None:
    """Header: magic, H, W, channels (uint32 LE each); then float64 LE, row-major."""
    arr = np.asarray(data, dtype="<f8")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    Path(path).write_bytes(RASTER_MAGIC + struct.pack("<III", h, w, c) + arr.tobytes())


def read_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RASTER_MAGIC:
        raise CorruptFile(f"{path}: not a raster file")
    h, w, c = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 8 * h * w * c:
        raise CorruptFile(f"{path}: size does not match {h}x{w}x{c}")
    arr = np.frombuffer(data, dtype="<f8", offset=16).reshape(h, w, c).astype(np.float64)
    return arr[..., 0] if c == 1 else arr
