"""Triplet training of the embedding network.

Batches hold ``D`` track ids with three crops each, taken from equally spaced
frames of the track. The loss is the batch-hard margin triplet loss: every
embedding acts as an anchor against its farthest same-id embedding and its
closest other-id embedding.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import embed_net
from .embed_net import NetworkParams
from .errors import InsufficientTracks, SingleIdentityBatch
from .mask_geometry import InstanceObservation
from .pointcloud import POSITION_DIM, InstanceCrop, SamplerConfig, extract_modalities, make_crop

log = logging.getLogger(__name__)

REL_ERR_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    ids_per_batch: int = 18
    margin: float = 0.2
    lr: float = 1e-3
    epochs: int = 20
    rng_seed: int = 0
    spacing_min: int = 1
    spacing_max: int = 10
    batches_per_epoch: Optional[int] = None
    init_seed: Optional[int] = None
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.ids_per_batch < 2:
            raise ValueError("ids_per_batch must be >= 2")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not 1 <= self.spacing_min <= self.spacing_max:
            raise ValueError("need 1 <= spacing_min <= spacing_max")

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


@dataclass
class CropEntry:
    frame_index: int
    obs: InstanceObservation
    crop: InstanceCrop


@dataclass
class CropDatabase:
    tracks: dict = field(default_factory=dict)  # track key -> list[CropEntry], frames increasing

    def add(self, key, entry: CropEntry) -> None:
        entries = self.tracks.setdefault(key, [])
        if entries and entries[-1].frame_index >= entry.frame_index:
            raise ValueError(f"frames of track {key} must be strictly increasing")
        entries.append(entry)

    def eligible(self) -> list:
        return [k for k in sorted(self.tracks, key=repr) if len(self.tracks[k]) >= 3]

    def __len__(self) -> int:
        return len(self.tracks)


def build_crop_database(sequences, k: float = 0.2) -> CropDatabase:
    """``sequences``: iterable of ``(name, frames)`` where each frame is
    ``(image, class_map, observations)`` with ground-truth track ids."""
    db = CropDatabase()
    for name, frames in sequences:
        for image, class_map, observations in frames:
            for obs in observations:
                crop = make_crop(image, class_map, obs, k)
                db.add((name, obs.track_id), CropEntry(obs.frame_index, obs, crop))
    return db


def feasible_triplets(frames, spacing_min: int = 1, spacing_max: int = 10) -> list:
    """All ``(start, spacing)`` with ``start``, ``start+s``, ``start+2s`` present."""
    present = set(frames)
    return [
        (t, s)
        for t in frames
        for s in range(spacing_min, spacing_max + 1)
        if t + s in present and t + 2 * s in present
    ]


def choose_triplet(entries, cfg: TrainConfig, rng: np.random.Generator) -> list:
    frames = [e.frame_index for e in entries]
    pairs = feasible_triplets(frames, cfg.spacing_min, cfg.spacing_max)
    if pairs:
        t, s = pairs[rng.integers(len(pairs))]
        pos = {f: i for i, f in enumerate(frames)}
        return [entries[pos[t]], entries[pos[t + s]], entries[pos[t + 2 * s]]]
    # no equally spaced triple: three consecutive stored crops
    i = int(rng.integers(len(entries) - 2))
    return entries[i:i + 3]


def sample_batch(db: CropDatabase, cfg: TrainConfig, rng: np.random.Generator) -> list:
    keys = db.eligible()
    if len(keys) < cfg.ids_per_batch:
        raise InsufficientTracks(
            f"{len(keys)} tracks with >= 3 crops, batch needs {cfg.ids_per_batch}"
        )
    chosen = rng.choice(len(keys), size=cfg.ids_per_batch, replace=False)
    return [(keys[i], choose_triplet(db.tracks[keys[i]], cfg, rng)) for i in chosen]


def pairwise_distances(emb) -> np.ndarray:
    diff = emb[:, None, :] - emb[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def hardest_pairs(dist, labels):
    """Per anchor: index of the farthest positive (or -1) and the closest negative.
    Ties go to the lowest index."""
    labels = np.asarray(labels)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    pos[~pos_mask.any(axis=1)] = -1
    neg = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    return pos, neg


def batch_hard_triplet_loss(emb, labels, margin: float):
    """Mean over anchors of ``max(0, d(a, p*) - d(a, n*) + margin)``.

    Returns ``(loss, grad)`` with ``grad`` the gradient w.r.t. ``emb``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise SingleIdentityBatch("batch needs at least two distinct identities")
    n = emb.shape[0]
    dist = pairwise_distances(emb)
    pos, neg = hardest_pairs(dist, labels)
    rows = np.arange(n)
    d_ap = np.where(pos >= 0, dist[rows, np.maximum(pos, 0)], 0.0)
    d_an = dist[rows, neg]
    hinge = d_ap - d_an + margin
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())

    grad = np.zeros_like(emb)
    for a in np.flatnonzero(active):
        p, q = pos[a], neg[a]
        if p >= 0 and d_ap[a] > 0:
            u = (emb[a] - emb[p]) / d_ap[a]
            grad[a] += u
            grad[p] -= u
        if d_an[a] > 0:
            u = (emb[a] - emb[q]) / d_an[a]
            grad[a] -= u
            grad[q] += u
    grad /= n
    return loss, grad


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: NetworkParams) -> AdamState:
    return AdamState(m=[np.zeros_like(a) for a in params.arrays()],
                     v=[np.zeros_like(a) for a in params.arrays()])


def optimizer_step(params: NetworkParams, grads: NetworkParams, state: AdamState, lr: float):
    """One bias-corrected adaptive-moment step. Returns ``(params, state)``."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_arrays, ms, vs = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_arrays.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        ms.append(m)
        vs.append(v)
    return params.with_arrays(new_arrays), AdamState(ms, vs, t, b1, b2, state.eps)


def batch_inputs(batch, sampler: SamplerConfig, seed_words, threads: int = 1):
    """Sample and encode every crop of a batch. Returns ``(fg, env, pos, labels)``.

    Crop ``i`` draws points from ``default_rng([*seed_words, i])`` so the
    result does not depend on the thread count.
    """
    jobs = []
    labels = []
    for label, (_, entries) in enumerate(batch):
        for e in entries:
            jobs.append(e.crop)
            labels.append(label)

    def work(i):
        rng = np.random.default_rng([*seed_words, i])
        return extract_modalities(jobs[i], sampler, rng)[1]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            mods = list(pool.map(work, range(len(jobs))))
    else:
        mods = [work(i) for i in range(len(jobs))]
    fg = np.stack([m.fg_features for m in mods])
    env = np.stack([m.env_features for m in mods])
    pos = np.stack([m.position for m in mods])
    return fg, env, pos, np.asarray(labels)


def loss_and_grads(params: NetworkParams, fg, env, pos, labels, margin: float):
    emb, trace = embed_net.forward(params, fg, env, pos)
    loss, g_emb = batch_hard_triplet_loss(emb, labels, margin)
    grads = embed_net.backward(params, trace, g_emb.astype(params.dtype))
    return loss, grads


def train(db: CropDatabase, cfg: TrainConfig, sampler: SamplerConfig,
          params: Optional[NetworkParams] = None, checkpoint_dir=None, threads: int = 1,
          on_epoch: Optional[Callable] = None):
    """Train from scratch (or from ``params``). Returns ``(params, epoch_losses)``."""
    if params is None:
        init_seed = cfg.rng_seed if cfg.init_seed is None else cfg.init_seed
        params = embed_net.init_params(init_seed, sampler.num_classes)
    n_eligible = len(db.eligible())
    if n_eligible < cfg.ids_per_batch:
        raise InsufficientTracks(f"{n_eligible} eligible tracks < {cfg.ids_per_batch}")
    n_batches = cfg.batches_per_epoch or max(1, n_eligible // cfg.ids_per_batch)
    dtype = np.dtype(cfg.compute_dtype)
    state = adam_init(params)
    curve = []
    for epoch in range(cfg.epochs):
        losses = []
        for bi in range(n_batches):
            rng = np.random.default_rng([cfg.rng_seed, epoch, bi])
            batch = sample_batch(db, cfg, rng)
            fg, env, pos, labels = batch_inputs(batch, sampler, (cfg.rng_seed, epoch, bi, 1), threads)
            work = params.astype(dtype)
            loss, grads = loss_and_grads(work, fg, env, pos, labels, cfg.margin)
            params, state = optimizer_step(params, grads.astype(np.float64), state, cfg.lr)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        curve.append(mean_loss)
        log.info("epoch %d mean loss %.6f", epoch, mean_loss)
        if checkpoint_dir is not None:
            d = Path(checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            embed_net.save_params(params, d / f"params_epoch{epoch:03d}.bin")
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, params)
    return params, curve


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])


def gradient_check(params: NetworkParams, fg, env, pos, labels, margin: float = 0.2,
                   h: float = 1e-4, max_params: Optional[int] = None, seed: int = 0):
    """Compare analytic gradients of the triplet loss with central differences.

    Returns ``(max_relative_error, n_checked)``. The relative error of one
    entry is ``|a - n| / max(|a|, |n|, REL_ERR_FLOOR)``; the floor keeps
    gradients that are zero up to rounding (e.g. the weight-head output bias,
    to which softmax is blind) from dividing noise by noise. With
    ``max_params`` a random subset of entries is checked.
    """
    params = params.astype(np.float64)
    _, grads = loss_and_grads(params, fg, env, pos, labels, margin)
    arrays = params.arrays()
    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if max_params is not None and max_params < len(coords):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_params, replace=False))
        coords = [coords[k] for k in pick]
    worst = 0.0
    analytic = [g.ravel() for g in grads.arrays()]
    for i, j in coords:
        flat = arrays[i].reshape(-1)
        old = flat[j]
        flat[j] = old + h
        lp, _ = _loss_only(params, fg, env, pos, labels, margin)
        flat[j] = old - h
        lm, _ = _loss_only(params, fg, env, pos, labels, margin)
        flat[j] = old
        num = (lp - lm) / (2 * h)
        a = analytic[i][j]
        err = abs(a - num) / max(abs(a), abs(num), REL_ERR_FLOOR)
        worst = max(worst, err)
    return worst, len(coords)


def _loss_only(params, fg, env, pos, labels, margin):
    emb, _ = embed_net.forward(params, fg, env, pos)
    return batch_hard_triplet_loss(emb, labels, margin)


def reference_tiny_setup(num_classes: int = 3, ids: int = 4, n_fg: int = 32, n_env: int = 16,
                         seed: int = 0):
    """The small network and batch used for gradient checking.

    Widths are 8/8 in both point branches, 4 in the weight head and 16 in
    fusion. Weights are the seed-7 initialisation plus N(0, 0.1) noise (so the
    zero-initialised head is exercised too). The batch holds ``ids`` identities
    with three crops each and random point features.

    Central differences are only meaningful if no leaky-ReLU pre-activation,
    hinge or hardest-pair choice flips within +-h. For a few input seeds one
    does flip at h=1e-4 and the check then reports ~1e-2 even though the
    analytic gradient is right (shrinking h to 1e-5 restores agreement). Seed 0
    is free of such crossings at h=1e-4 and is the reference.
    """
    widths = embed_net.default_widths(num_classes, fg_hidden=(8, 8), head_hidden=(4,),
                                      env_hidden=(8, 8), fusion_hidden=(16,))
    base = embed_net.init_params(7, num_classes, widths)
    noise = np.random.default_rng(1)
    params = base.with_arrays([a + noise.normal(scale=0.1, size=a.shape) for a in base.arrays()])
    rng = np.random.default_rng(seed)
    batch = ids * 3
    fg = rng.normal(size=(batch, n_fg, 5))
    env = rng.normal(size=(batch, n_env, 5 + num_classes))
    cls = rng.integers(0, num_classes, size=(batch, n_env))
    env[..., 5:] = np.eye(num_classes)[cls]
    pos = rng.uniform(-1, 1, size=(batch, POSITION_DIM))
    labels = np.repeat(np.arange(ids), 3)
    return params, fg, env, pos, labels
