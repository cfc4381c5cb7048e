"""Online association of per-frame instances into tracks.

Similarity between a track and a new instance is the negative Euclidean
distance of their embeddings plus ``alpha`` times the IoU of the track's
latest mask with the instance mask. Each frame is solved as a minimum-cost
assignment; assigned pairs whose similarity does not exceed ``gamma`` are
dropped, unassigned instances open new tracks, and tracks that have not been
updated for more than ``beta`` frames are retired.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import NonMonotonicFrame
from .mask_geometry import BinaryMask, InstanceObservation, mask_iou


@dataclass(frozen=True)
class TrackerConfig:
    alpha: float = 0.5
    beta: int = 30
    gamma: float = -8.0

    def __post_init__(self):
        if self.beta < 1:
            raise ValueError("beta must be >= 1")


@dataclass
class Track:
    track_id: int
    latest_embedding: np.ndarray
    latest_mask: BinaryMask
    last_update_frame: int
    history: list = field(default_factory=list)

    def update(self, frame: int, embedding, mask: BinaryMask) -> None:
        self.latest_embedding = embedding
        self.latest_mask = mask
        self.last_update_frame = frame
        self.history.append((frame, mask))


@dataclass
class TrackerState:
    active: dict = field(default_factory=dict)  # track id -> Track, in creation order
    retired: list = field(default_factory=list)
    next_id: int = 1
    frame: Optional[int] = None


def similarity(m_i, m_j, s_i: BinaryMask, s_j: BinaryMask, alpha: float) -> float:
    d = float(np.linalg.norm(np.asarray(m_i, dtype=np.float64) - np.asarray(m_j, dtype=np.float64)))
    return -d + alpha * mask_iou(s_i, s_j)


def solve_assignment(cost) -> list:
    """Minimum-cost one-to-one assignment on a rectangular cost matrix.

    Shortest augmenting paths with row/column potentials (Hungarian method,
    O(n^2 m)). Rows are inserted in index order and columns scanned in index
    order with strict comparisons, so ties always resolve toward the lower
    (row, col). Returns ``min(R, C)`` pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2D matrix")
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    transposed = n_rows > n_cols
    a = cost.T if transposed else cost
    n, m = a.shape  # n <= m

    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[r, c] for r, c in pairs))


def retire_idle(state: TrackerState, frame: int, cfg: TrackerConfig) -> None:
    for tid in list(state.active):
        t = state.active[tid]
        if frame > t.last_update_frame + cfg.beta:
            state.retired.append(state.active.pop(tid))


def step(state: TrackerState, frame: int, instances, cfg: TrackerConfig) -> list:
    """Associate one frame. ``instances`` is a list of ``(observation, embedding)``.
    Returns the track id given to each instance, in input order."""
    if state.frame is not None and frame <= state.frame:
        raise NonMonotonicFrame(f"frame {frame} after frame {state.frame}")
    state.frame = frame
    retire_idle(state, frame, cfg)

    tracks = list(state.active.values())
    ids: list = [None] * len(instances)
    if tracks and instances:
        sim = np.empty((len(tracks), len(instances)))
        for r, t in enumerate(tracks):
            for c, (obs, emb) in enumerate(instances):
                sim[r, c] = similarity(t.latest_embedding, emb, t.latest_mask, obs.mask, cfg.alpha)
        for r, c in solve_assignment(-sim):
            if sim[r, c] > cfg.gamma:
                obs, emb = instances[c]
                tracks[r].update(frame, emb, obs.mask)
                ids[c] = tracks[r].track_id
    for c, (obs, emb) in enumerate(instances):
        if ids[c] is None:
            tid = state.next_id
            state.next_id += 1
            state.active[tid] = Track(tid, emb, obs.mask, frame, [(frame, obs.mask)])
            ids[c] = tid
    return ids


def run_sequence(frames: Iterable, cfg: TrackerConfig) -> list:
    """Fold :func:`step` over ``(frame_index, [(observation, embedding), ...])``
    pairs. Returns the observations relabelled with their track ids."""
    state = TrackerState()
    out = []
    for frame, instances in frames:
        ids = step(state, frame, instances, cfg)
        for (obs, _), tid in zip(instances, ids):
            out.append(InstanceObservation(frame, obs.class_id, obs.mask, tid))
    return out
