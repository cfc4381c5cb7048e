import numpy as np

from pointmots import embed_net
from pointmots.mots_eval import motsa
from pointmots.pipeline import Ablation, EmbeddingExtractor, evaluate_tracking, strip_ids, track_sequence
from pointmots.pointcloud import SamplerConfig, encode_modalities, sample_points
from pointmots.synth_world import WorldConfig, gen_sequence
from pointmots.tracker import TrackerConfig

from conftest import Z, perturbed

SEQ = gen_sequence(WorldConfig(width=64, height=48, frames=10, min_objects=3, max_objects=4,
                               rng_seed=9))
SAMPLER = SamplerConfig(n_fg=64, n_env=32)
PARAMS = perturbed(embed_net.init_params(0, Z), seed=3, scale=0.02)


def frame0():
    obs = [o for o in SEQ.instances if o.frame_index == 0]
    return SEQ.images[0], SEQ.class_maps[0], obs


def test_ablation_zeroes_blocks():
    image, cls, obs = frame0()
    mod = encode_modalities(sample_points(image, cls, obs[0], SAMPLER), Z)
    Ablation(color=True, position=True, category=True).apply(mod)
    assert not mod.fg_features[:, 2:5].any() and not mod.env_features[:, 2:].any()
    assert not mod.position.any() and mod.fg_features[:, :2].any()
    Ablation(offset=True).apply(mod)
    assert not mod.fg_features.any()


def test_extractor_threads_match():
    image, cls, obs = frame0()
    a = EmbeddingExtractor(PARAMS, SAMPLER, seed=1).embed_frame(image, cls, obs)
    b = EmbeddingExtractor(PARAMS, SAMPLER, seed=1, threads=3).embed_frame(image, cls, obs)
    assert len(a) == len(obs) == len(b)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    c = EmbeddingExtractor(PARAMS, SAMPLER, seed=2).embed_frame(image, cls, obs)
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a, c))


def test_extractor_records_latency_and_dtype():
    image, cls, obs = frame0()
    ex = EmbeddingExtractor(PARAMS, SAMPLER)
    out = ex.embed_instance(image, cls, obs[0], 0)
    assert out.dtype == np.float64 and out.shape == (32,)
    assert len(ex.latencies) == 1 and ex.median_latency_ms() > 0
    assert EmbeddingExtractor(PARAMS, SAMPLER).median_latency_ms() is None
    zero = EmbeddingExtractor(PARAMS, SAMPLER, ablation=Ablation(embedding=True))
    assert not zero.embed_instance(image, cls, obs[0], 0).any()


def test_track_sequence_ignores_gt_ids():
    ex = EmbeddingExtractor(PARAMS, SAMPLER)
    a = track_sequence(SEQ, ex, TrackerConfig())
    relabelled = [type(o)(o.frame_index, o.class_id, o.mask, 1000 + (o.track_id or 0))
                  for o in SEQ.instances]
    b = track_sequence(SEQ, ex, TrackerConfig(), detections=relabelled)
    assert a == b
    assert all(o.track_id is None for o in strip_ids(SEQ.instances))


def test_evaluate_tracking_reasonable():
    c = evaluate_tracking([SEQ], EmbeddingExtractor(PARAMS, SAMPLER), TrackerConfig())
    assert c.gt_total == len(SEQ.instances) and c.fp == 0 and c.fn == 0
    assert motsa(c) > 0.5
