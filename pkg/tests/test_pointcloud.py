import math

import numpy as np
import pytest

from pointmots.errors import ClassOutOfRange, EmptyMask
from pointmots.mask_geometry import BBox, InstanceObservation, rle_encode
from pointmots.pointcloud import (InstanceCrop, PointCloudPair, SamplerConfig, encode_category,
                                  encode_modalities, encode_offsets, encode_position,
                                  make_crop, sample_crop, sample_points)


def scene(h=20, w=24, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    cls = np.ones((h, w), dtype=np.uint8)
    seg = np.zeros((h, w), dtype=bool)
    seg[5:12, 6:14] = True
    cls[seg] = 2
    other = np.zeros((h, w), dtype=bool)
    other[5:12, 15:18] = True
    cls[other] = 3
    obs = InstanceObservation(0, 2, rle_encode(seg))
    return image, cls, seg, obs


def test_single_pixel_segment():
    image, cls, _, _ = scene()
    seg = np.zeros(cls.shape, dtype=bool)
    seg[4, 7] = True
    obs = InstanceObservation(0, 2, rle_encode(seg))
    pc = sample_points(image, cls, obs, SamplerConfig(n_fg=4, n_env=3))
    assert np.array_equal(pc.fg_uv, np.tile([7.0, 4.0], (4, 1)))
    assert np.array_equal(pc.center, [7.0, 4.0])


def test_center_is_mean_of_samples():
    pc = PointCloudPair(
        fg_uv=np.array([[0.0, 0.0], [2.0, 2.0]]), fg_rgb=np.zeros((2, 3)),
        env_uv=np.zeros((1, 2)), env_rgb=np.zeros((1, 3)), env_class=np.ones(1, dtype=int),
        center=np.array([1.0, 1.0]), crop_box=BBox(0, 0, 3, 3), tight_box=BBox(0, 0, 3, 3),
        image_width=3, image_height=3,
    )
    crop = InstanceCrop(
        image=np.zeros((3, 3, 3), dtype=np.uint8), class_map=np.ones((3, 3), dtype=np.uint8),
        segment=np.eye(3, dtype=bool) & np.array([1, 0, 1], dtype=bool)[:, None],
        crop_box=BBox(0, 0, 3, 3), tight_box=BBox(0, 0, 3, 3), image_width=3, image_height=3,
    )
    rng = np.random.default_rng(0)
    out = sample_crop(crop, SamplerConfig(n_fg=2000, n_env=5), rng)
    assert np.allclose(out.center, out.fg_uv.mean(axis=0))
    # both pixels drawn about equally often -> center near (1, 1)
    assert np.allclose(out.center, pc.center, atol=0.1)


def test_deterministic_given_seed():
    image, cls, _, obs = scene()
    cfg = SamplerConfig(n_fg=50, n_env=30, rng_seed=11)
    a = sample_points(image, cls, obs, cfg)
    b = sample_points(image, cls, obs, cfg)
    for f in ("fg_uv", "fg_rgb", "env_uv", "env_rgb", "env_class", "center"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_points_lie_where_they_should(seed):
    image, cls, seg, obs = scene()
    pc = sample_points(image, cls, obs, SamplerConfig(n_fg=200, n_env=200, rng_seed=seed))
    fu, fv = pc.fg_uv.astype(int).T
    assert seg[fv, fu].all()
    eu, ev = pc.env_uv.astype(int).T
    assert not seg[ev, eu].any()
    b = pc.crop_box
    assert ((eu >= b.x0) & (eu < b.x1) & (ev >= b.y0) & (ev < b.y1)).all()
    assert np.array_equal(pc.env_class, cls[ev, eu])
    assert np.array_equal(pc.fg_rgb, image[fv, fu])


def test_environment_includes_other_instances():
    image, cls, _, obs = scene()
    pc = sample_points(image, cls, obs, SamplerConfig(n_fg=10, n_env=2000, k=0.5))
    assert (pc.env_class == 3).any()


def test_empty_environment_uses_flagged_sentinel():
    image = np.zeros((4, 4, 3), dtype=np.uint8)
    cls = np.full((4, 4), 2, dtype=np.uint8)
    obs = InstanceObservation(0, 2, rle_encode(np.ones((4, 4))))
    pc = sample_points(image, cls, obs, SamplerConfig(n_fg=5, n_env=3))
    assert pc.env_empty
    assert np.array_equal(pc.env_uv, np.zeros((3, 2)))


def test_empty_mask_rejected():
    image, cls, _, _ = scene()
    crop = make_crop(image, cls, scene()[3])
    crop.segment[:] = False
    with pytest.raises(EmptyMask):
        sample_crop(crop, SamplerConfig(), np.random.default_rng(0))


def test_offset_examples():
    pc = PointCloudPair(
        fg_uv=np.array([[5.0, 7.0], [3.0, 4.0]]), fg_rgb=np.zeros((2, 3)),
        env_uv=np.array([[13.0, 14.0]]), env_rgb=np.zeros((1, 3)), env_class=np.ones(1, dtype=int),
        center=np.array([3.0, 4.0]), crop_box=BBox(0, 0, 30, 40), tight_box=BBox(0, 0, 30, 40),
        image_width=50, image_height=50,
    )
    fg, env = encode_offsets(pc, normalize=False)
    assert fg.tolist() == [[2.0, 3.0], [0.0, 0.0]]
    assert env.tolist() == [[10.0, 10.0]]
    fg_n, env_n = encode_offsets(pc, normalize=True)
    assert np.allclose(fg_n, fg / 50.0) and np.allclose(env_n, env / 50.0)


def test_offsets_translation_invariant():
    image, cls, seg, obs = scene(h=40, w=40)
    shifted_img = np.roll(image, (10, 10), axis=(0, 1))
    shifted_cls = np.roll(cls, (10, 10), axis=(0, 1))
    shifted_obs = InstanceObservation(0, 2, rle_encode(np.roll(seg, (10, 10), axis=(0, 1))))
    cfg = SamplerConfig(n_fg=40, n_env=40, rng_seed=3)
    a = sample_points(image, cls, obs, cfg)
    b = sample_points(shifted_img, shifted_cls, shifted_obs, cfg)
    for x, y in zip(encode_offsets(a), encode_offsets(b)):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_category_examples():
    pc = PointCloudPair(
        fg_uv=np.zeros((1, 2)), fg_rgb=np.zeros((1, 3)), env_uv=np.zeros((3, 2)),
        env_rgb=np.zeros((3, 3)), env_class=np.array([2, 1, 3]), center=np.zeros(2),
        crop_box=BBox(0, 0, 1, 1), tight_box=BBox(0, 0, 1, 1), image_width=1, image_height=1,
    )
    oh = encode_category(pc, 3)
    assert oh[0].tolist() == [0, 1, 0]
    assert (oh.sum(axis=1) == 1).all()
    pc.env_class = np.array([4])
    with pytest.raises(ClassOutOfRange):
        encode_category(pc, 3)


def test_category_histogram_matches_samples():
    image, cls, _, obs = scene()
    pc = sample_points(image, cls, obs, SamplerConfig(n_fg=5, n_env=500, k=0.6))
    oh = encode_category(pc, 3)
    assert np.array_equal(np.bincount(oh.argmax(axis=1) + 1, minlength=4)[1:],
                          np.bincount(pc.env_class, minlength=4)[1:])


def test_position_examples():
    e = encode_position(BBox(0, 0, 10, 10), 20, 20)
    assert e.shape == (64,)
    assert e[:16].tolist() == [0.0, 1.0] * 8
    a = encode_position(BBox(0, 0, 10, 10), 20, 20)
    b = encode_position(BBox(10, 0, 12, 10), 20, 20)  # x0 differs by 0.5 normalized
    assert np.abs(a - b).max() > 1e-3


def test_position_frequencies():
    e = encode_position(BBox(2, 4, 6, 8), 10, 10)
    p = 0.2
    for j in range(8):
        f = 10000.0 ** (-2 * j / 16)
        assert math.isclose(e[2 * j], math.sin(p * f), rel_tol=0, abs_tol=1e-15)
        assert math.isclose(e[2 * j + 1], math.cos(p * f), rel_tol=0, abs_tol=1e-15)


def test_modalities_shapes_and_blocks():
    image, cls, _, obs = scene()
    pc = sample_points(image, cls, obs, SamplerConfig(n_fg=64, n_env=32))
    mod = encode_modalities(pc, 3)
    assert mod.fg_features.shape == (64, 5)
    assert mod.env_features.shape == (32, 8)
    assert (mod.env_features[:, 5:].sum(axis=1) == 1).all()
    assert (mod.fg_features[:, 2:] <= 1).all() and (mod.fg_features[:, 2:] >= 0).all()
