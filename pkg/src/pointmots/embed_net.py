"""Two-branch point cloud embedding network with hand-written backward pass.

Foreground branch: shared per-point perceptron, a per-point scalar score head,
softmax over points and a weighted sum of point features. Environment branch:
shared per-point perceptron followed by coordinate-wise max pooling. The two
pooled vectors and the position embedding are concatenated and mapped to the
instance embedding by a fusion perceptron.

All functions operate on batches: ``fg`` is ``(B, N_F, 5)``, ``env`` is
``(B, N_E, 5 + Z)`` and ``pos`` is ``(B, 64)``. Points are put in a canonical
(lexicographic) order before anything else so that the output does not depend
on the order points were supplied in, down to the last bit.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CorruptFile, ShapeMismatch, VersionMismatch
from .pointcloud import POSITION_DIM

LEAKY_SLOPE = 0.1
EMBED_DIM = 32
GROUPS = ("fg", "head", "env", "fusion")

FG_HIDDEN = (64, 128, 256)
HEAD_HIDDEN = (64,)
ENV_HIDDEN = (64, 128, 256)
FUSION_HIDDEN = (256, 64)

_MAGIC = b"PMEMBNET"
_VERSION = 1


def default_widths(num_classes: int, fg_hidden=FG_HIDDEN, head_hidden=HEAD_HIDDEN,
                   env_hidden=ENV_HIDDEN, fusion_hidden=FUSION_HIDDEN,
                   out_dim: int = EMBED_DIM) -> dict:
    fg = (5,) + tuple(fg_hidden)
    env = (5 + num_classes,) + tuple(env_hidden)
    return {
        "fg": fg,
        "head": (fg[-1],) + tuple(head_hidden) + (1,),
        "env": env,
        "fusion": (fg[-1] + env[-1] + POSITION_DIM,) + tuple(fusion_hidden) + (out_dim,),
    }


@dataclass
class NetworkParams:
    num_classes: int
    # group name -> list of (W, b) with W of shape (fan_in, fan_out)
    layers: dict

    @property
    def widths(self) -> dict:
        out = {}
        for g in GROUPS:
            ws = self.layers[g]
            out[g] = (ws[0][0].shape[0],) + tuple(W.shape[1] for W, _ in ws)
        return out

    @property
    def dtype(self):
        return self.layers["fg"][0][0].dtype

    def arrays(self) -> list:
        out = []
        for g in GROUPS:
            for W, b in self.layers[g]:
                out.extend((W, b))
        return out

    def names(self) -> list:
        out = []
        for g in GROUPS:
            for i in range(len(self.layers[g])):
                out.extend((f"{g}.{i}.W", f"{g}.{i}.b"))
        return out

    def with_arrays(self, arrays) -> "NetworkParams":
        it = iter(arrays)
        layers = {g: [(next(it), next(it)) for _ in self.layers[g]] for g in GROUPS}
        return NetworkParams(self.num_classes, layers)

    def astype(self, dtype) -> "NetworkParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])

    def copy(self) -> "NetworkParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "NetworkParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])


@dataclass
class ForwardTrace:
    fg_acts: list  # per layer (B*N_F, width) activations, input first
    head_acts: list
    env_acts: list
    fusion_acts: list  # (B, width), input (the 576-dim concat) first
    scores: np.ndarray  # (B, N_F) weight-head logits
    weights: np.ndarray  # (B, N_F) softmax point weights
    argmax: np.ndarray  # (B, C_env) index of the pooled env point per channel
    m_fg: np.ndarray
    m_env: np.ndarray
    fg_order: np.ndarray  # (B, N_F) canonical position -> supplied index
    env_order: np.ndarray
    shape: tuple = field(default=(0, 0, 0))  # (B, N_F, N_E)

    def point_weights(self, b: int = 0) -> np.ndarray:
        """Softmax weights of instance ``b`` in the order the points were supplied."""
        w = np.empty_like(self.weights[b])
        w[self.fg_order[b]] = self.weights[b]
        return w

    def env_argmax(self, b: int = 0) -> np.ndarray:
        """Supplied index of the env point winning each pooled channel."""
        return self.env_order[b][self.argmax[b]]


def _lrelu_grad_inplace(g, a):
    # masked ufuncs are slow; build the 1 / slope factor densely instead
    f = np.greater(a, 0).astype(g.dtype)
    f *= 1.0 - LEAKY_SLOPE
    f += LEAKY_SLOPE
    g *= f
    return g


def init_params(seed: int, num_classes: int, widths: Optional[dict] = None) -> NetworkParams:
    rng = np.random.default_rng(seed)
    widths = widths or default_widths(num_classes)
    layers = {}
    for g in GROUPS:
        ws = widths[g]
        group = []
        for i, (fan_in, fan_out) in enumerate(zip(ws[:-1], ws[1:])):
            if g == "head" and i == len(ws) - 2:
                W = np.zeros((fan_in, fan_out))
            else:
                lim = math.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            group.append((W, np.zeros(fan_out)))
        layers[g] = group
    params = NetworkParams(num_classes, layers)
    _check_widths(params)
    return params


def _check_widths(params: NetworkParams) -> None:
    w = params.widths
    if w["fg"][0] != 5 or w["env"][0] != 5 + params.num_classes:
        raise ShapeMismatch(f"branch input widths {w['fg'][0]}, {w['env'][0]}")
    if w["head"][0] != w["fg"][-1] or w["head"][-1] != 1:
        raise ShapeMismatch("weight head must map foreground features to a scalar")
    if w["fusion"][0] != w["fg"][-1] + w["env"][-1] + POSITION_DIM:
        raise ShapeMismatch("fusion input width must equal the concatenated width")
    for g in GROUPS:
        prev = None
        for W, b in params.layers[g]:
            if prev is not None and W.shape[0] != prev:
                raise ShapeMismatch(f"layer chain broken in group {g}")
            if b.shape != (W.shape[1],):
                raise ShapeMismatch(f"bias shape {b.shape} in group {g}")
            prev = W.shape[1]


def _canonical_order(x: np.ndarray) -> np.ndarray:
    # byte-wise row order: arbitrary but total, and cheaper than a numeric lexsort
    x = np.ascontiguousarray(x)
    rows = x.view(np.dtype((np.void, x.itemsize * x.shape[1]))).ravel()
    return np.argsort(rows, kind="stable")


class Workspace:
    """Reusable activation buffers for repeated inference on one thread.

    Fresh large arrays cost a page fault per 4 KiB page on first touch; reusing
    buffers avoids that. A trace produced with a workspace is only valid until
    the next forward call using the same workspace.
    """

    def __init__(self):
        self._bufs: dict = {}

    def get(self, key, shape, dtype) -> np.ndarray:
        buf = self._bufs.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._bufs[key] = buf
        return buf


def _mlp(x2d, layers, acts, last_linear=False, ws=None, tag=""):
    a = x2d
    acts.append(a)
    n = len(layers)
    for i, (W, b) in enumerate(layers):
        if ws is None:
            z = a @ W
            tmp = None
        else:
            shape = (a.shape[0], W.shape[1])
            z = np.matmul(a, W, out=ws.get((tag, i), shape, a.dtype))
            tmp = ws.get((tag, i, "t"), shape, a.dtype)
        z += b
        if not (last_linear and i == n - 1):
            np.maximum(z, np.multiply(z, LEAKY_SLOPE, out=tmp), out=z)
        a = z
        acts.append(a)
    return a


def _mlp_backward(g, layers, acts, grads, last_linear=False, need_input_grad=False):
    n = len(layers)
    g = np.array(g)
    for i in range(n - 1, -1, -1):
        W, _ = layers[i]
        if not (last_linear and i == n - 1):
            g = _lrelu_grad_inplace(g, acts[i + 1])
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        if i > 0 or need_input_grad:
            g = g @ W.T
    return g


def forward(params: NetworkParams, fg, env, pos, workspace: Optional[Workspace] = None):
    """Embed a batch of instances. Returns ``(M, trace)`` with ``M`` of shape ``(B, 32)``."""
    dt = params.dtype
    fg = np.asarray(fg, dtype=dt)
    env = np.asarray(env, dtype=dt)
    pos = np.asarray(pos, dtype=dt)
    if fg.ndim == 2:
        fg, env, pos = fg[None], env[None], pos[None]
    widths = params.widths
    if fg.shape[-1] != widths["fg"][0] or env.shape[-1] != widths["env"][0] \
            or pos.shape[-1] != POSITION_DIM or not (fg.shape[0] == env.shape[0] == pos.shape[0]):
        raise ShapeMismatch(
            f"inputs {fg.shape}, {env.shape}, {pos.shape} do not fit widths {widths}"
        )
    B, NF, _ = fg.shape
    NE = env.shape[1]

    fg_order = np.stack([_canonical_order(x) for x in fg])
    env_order = np.stack([_canonical_order(x) for x in env])
    fg = np.take_along_axis(fg, fg_order[..., None], axis=1)
    env = np.take_along_axis(env, env_order[..., None], axis=1)

    fg_acts: list = []
    f = _mlp(fg.reshape(B * NF, -1), params.layers["fg"], fg_acts, ws=workspace, tag="fg")
    head_acts: list = []
    s = _mlp(f, params.layers["head"], head_acts, last_linear=True,
             ws=workspace, tag="head").reshape(B, NF)
    s_max = s.max(axis=1, keepdims=True)
    e = np.exp(s - s_max)
    w = e / e.sum(axis=1, keepdims=True)
    f3 = f.reshape(B, NF, -1)
    m_fg = np.einsum("bn,bnc->bc", w, f3)

    env_acts: list = []
    h = _mlp(env.reshape(B * NE, -1), params.layers["env"], env_acts,
             ws=workspace, tag="env").reshape(B, NE, -1)
    argmax = h.argmax(axis=1)
    m_env = np.take_along_axis(h, argmax[:, None, :], axis=1)[:, 0, :]

    fused_in = np.concatenate([m_fg, m_env, pos], axis=1)
    fusion_acts: list = []
    out = _mlp(fused_in, params.layers["fusion"], fusion_acts, last_linear=True)

    trace = ForwardTrace(
        fg_acts=fg_acts, head_acts=head_acts, env_acts=env_acts, fusion_acts=fusion_acts,
        scores=s, weights=w, argmax=argmax, m_fg=m_fg, m_env=m_env,
        fg_order=fg_order, env_order=env_order, shape=(B, NF, NE),
    )
    return out, trace


def backward(params: NetworkParams, trace: ForwardTrace, grad_out) -> NetworkParams:
    """Parameter gradients for upstream gradient ``grad_out`` of shape ``(B, 32)``.

    Max pooling routes each channel's gradient to its argmax point (lowest
    canonical index on ties). Gradients are summed over the batch.
    """
    B, NF, NE = trace.shape
    g_out = np.asarray(grad_out, dtype=params.dtype).reshape(B, -1)
    grads = {g: [None] * len(params.layers[g]) for g in GROUPS}

    g_in = _mlp_backward(g_out, params.layers["fusion"], trace.fusion_acts,
                         grads["fusion"], last_linear=True, need_input_grad=True)
    c_fg = trace.m_fg.shape[1]
    c_env = trace.m_env.shape[1]
    g_mfg = g_in[:, :c_fg]
    g_menv = g_in[:, c_fg:c_fg + c_env]

    # environment branch: scatter through max pooling
    g_h = np.zeros((B, NE, c_env), dtype=g_menv.dtype)
    bi = np.repeat(np.arange(B), c_env)
    ci = np.tile(np.arange(c_env), B)
    g_h[bi, trace.argmax.ravel(), ci] = g_menv.ravel()
    _mlp_backward(g_h.reshape(B * NE, c_env), params.layers["env"], trace.env_acts, grads["env"])

    # foreground branch: weighted sum and softmax
    f3 = trace.fg_acts[-1].reshape(B, NF, c_fg)
    w = trace.weights
    g_f = w[:, :, None] * g_mfg[:, None, :]
    g_w = np.einsum("bnc,bc->bn", f3, g_mfg)
    g_s = w * (g_w - (w * g_w).sum(axis=1, keepdims=True))
    g_f_head = _mlp_backward(g_s.reshape(B * NF, 1), params.layers["head"], trace.head_acts,
                             grads["head"], last_linear=True, need_input_grad=True)
    g_f = g_f.reshape(B * NF, c_fg) + g_f_head
    _mlp_backward(g_f, params.layers["fg"], trace.fg_acts, grads["fg"])

    return NetworkParams(params.num_classes, {g: list(grads[g]) for g in GROUPS})


def embed(params: NetworkParams, mod, workspace: Optional[Workspace] = None) -> np.ndarray:
    """Embedding of a single instance from its ``ModalityTensors``."""
    out, _ = forward(params, mod.fg_features, mod.env_features, mod.position, workspace)
    return out[0].copy()


def top_weight_indices(trace: ForwardTrace, frac: float = 0.1, b: int = 0) -> np.ndarray:
    """Supplied indices of the ``ceil(frac * N_F)`` highest-weighted foreground
    points; ties go to the lower index."""
    w = trace.point_weights(b)
    k = max(1, math.ceil(frac * w.size - 1e-9))
    return np.argsort(-w, kind="stable")[:k]


def critical_env_indices(trace: ForwardTrace, count: int = 5, b: int = 0) -> np.ndarray:
    """Env points that win the most pooled channels, most frequent first;
    ties go to the lower index."""
    winners = trace.env_argmax(b)
    idx, freq = np.unique(winners, return_counts=True)
    order = np.lexsort((idx, -freq))
    return idx[order][:count]


# -- serialization -----------------------------------------------------------

def _header(params: NetworkParams) -> bytes:
    parts = [_MAGIC, struct.pack("<II", _VERSION, params.num_classes)]
    parts.append(struct.pack("<I", len(GROUPS)))
    for g in GROUPS:
        ws = params.widths[g]
        parts.append(struct.pack("<I", len(ws)))
        parts.append(struct.pack(f"<{len(ws)}I", *ws))
    return b"".join(parts)


def params_to_bytes(params: NetworkParams) -> bytes:
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    return _header(params) + body


def params_from_bytes(data: bytes, num_classes: Optional[int] = None) -> NetworkParams:
    try:
        if data[:8] != _MAGIC:
            raise CorruptFile("bad magic")
        version, z = struct.unpack_from("<II", data, 8)
        if version != _VERSION:
            raise VersionMismatch(f"file version {version}, expected {_VERSION}")
        if num_classes is not None and z != num_classes:
            raise VersionMismatch(f"file built for Z={z}, expected Z={num_classes}")
        off = 16
        (n_groups,) = struct.unpack_from("<I", data, off)
        off += 4
        if n_groups != len(GROUPS):
            raise CorruptFile(f"{n_groups} layer groups, expected {len(GROUPS)}")
        widths = {}
        for g in GROUPS:
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            widths[g] = struct.unpack_from(f"<{n}I", data, off)
            off += 4 * n
    except struct.error as exc:
        raise CorruptFile(f"truncated header: {exc}") from None
    layers = {}
    for g in GROUPS:
        ws = widths[g]
        group = []
        for fan_in, fan_out in zip(ws[:-1], ws[1:]):
            arrs = []
            for shape in ((fan_in, fan_out), (fan_out,)):
                n = int(np.prod(shape))
                if off + 8 * n > len(data):
                    raise CorruptFile("truncated parameter data")
                arrs.append(np.frombuffer(data, dtype="<f8", count=n, offset=off)
                            .reshape(shape).astype(np.float64))
                off += 8 * n
            group.append(tuple(arrs))
        layers[g] = group
    if off != len(data):
        raise CorruptFile(f"{len(data) - off} trailing bytes")
    params = NetworkParams(z, layers)
    try:
        _check_widths(params)
    except ShapeMismatch as exc:
        raise CorruptFile(str(exc)) from None
    if not all(np.isfinite(a).all() for a in params.arrays()):
        raise CorruptFile("non-finite parameters")
    return params


def save_params(params: NetworkParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path, num_classes: Optional[int] = None) -> NetworkParams:
    return params_from_bytes(Path(path).read_bytes(), num_classes)
