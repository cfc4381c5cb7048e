"""Glue between the modules: per-instance embedding extraction, tracking of
whole sequences and evaluation against ground truth."""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import embed_net
from .embed_net import NetworkParams
from .mask_geometry import InstanceObservation, group_by_frame
from .mots_eval import EvalCounts, evaluate_sequence
from .pointcloud import SamplerConfig, encode_modalities, sample_points
from .tracker import TrackerConfig, run_sequence


@dataclass
class Ablation:
    """Modalities zeroed at inference time."""

    color: bool = False
    position: bool = False
    offset: bool = False
    category: bool = False
    embedding: bool = False  # replace the whole embedding by zeros

    def apply(self, mod) -> None:
        if self.offset:
            mod.fg_features[:, 0:2] = 0.0
            mod.env_features[:, 0:2] = 0.0
        if self.color:
            mod.fg_features[:, 2:5] = 0.0
            mod.env_features[:, 2:5] = 0.0
        if self.category:
            mod.env_features[:, 5:] = 0.0
        if self.position:
            mod.position[:] = 0.0


@dataclass
class EmbeddingExtractor:
    params: NetworkParams
    sampler: SamplerConfig
    seed: int = 0
    threads: int = 1
    dtype: str = "float32"
    ablation: Ablation = field(default_factory=Ablation)
    latencies: list = field(default_factory=list)

    def __post_init__(self):
        self._work = self.params.astype(np.dtype(self.dtype))
        self._local = threading.local()

    def _workspace(self) -> embed_net.Workspace:
        ws = getattr(self._local, "ws", None)
        if ws is None:
            ws = self._local.ws = embed_net.Workspace()
        return ws

    def embed_instance(self, image, class_map, obs: InstanceObservation, index: int) -> np.ndarray:
        """Embedding of one instance; its sampling RNG is keyed by
        ``(seed, frame, index)`` so results do not depend on scheduling."""
        if self.ablation.embedding:
            return np.zeros(self.params.widths["fusion"][-1])
        t0 = time.perf_counter()
        rng = np.random.default_rng([self.seed, obs.frame_index, index])
        pc = sample_points(image, class_map, obs, self.sampler, rng)
        mod = encode_modalities(pc, self.sampler.num_classes, self.sampler.normalize)
        self.ablation.apply(mod)
        out = embed_net.embed(self._work, mod, self._workspace()).astype(np.float64)
        self.latencies.append(time.perf_counter() - t0)
        return out

    def embed_frame(self, image, class_map, observations) -> list:
        jobs = range(len(observations))
        fn = lambda i: self.embed_instance(image, class_map, observations[i], i)  # noqa: E731
        if self.threads > 1 and len(observations) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                return list(pool.map(fn, jobs))
        return [fn(i) for i in jobs]

    def median_latency_ms(self) -> Optional[float]:
        return float(np.median(self.latencies) * 1e3) if self.latencies else None


def strip_ids(observations) -> list:
    return [InstanceObservation(o.frame_index, o.class_id, o.mask, None) for o in observations]


def track_sequence(seq, extractor: EmbeddingExtractor, cfg: TrackerConfig,
                   detections: Optional[list] = None) -> list:
    """Track ``detections`` (default: the sequence's ground-truth masks with
    identities removed). Returns the relabelled observations."""
    dets = strip_ids(seq.instances if detections is None else detections)
    by_frame = group_by_frame(dets)

    def frames():
        for t in range(seq.n_frames):
            obs = by_frame.get(t, [])
            if obs:
                embs = extractor.embed_frame(seq.image(t), seq.class_map(t), obs)
            else:
                embs = []
            yield t, list(zip(obs, embs))

    return run_sequence(frames(), cfg)


def evaluate_tracking(seqs, extractor: EmbeddingExtractor, cfg: TrackerConfig) -> EvalCounts:
    total = EvalCounts()
    for seq in seqs:
        hyp = track_sequence(seq, extractor, cfg)
        total = total + evaluate_sequence(seq.instances, hyp)
    return total
