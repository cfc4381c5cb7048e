import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointmots.errors import DimensionMismatch, EmptyMask, MalformedRle
from pointmots.mask_geometry import (BBox, BinaryMask, InstanceObservation, enlarge_bbox,
                                     mask_iou, parse_mask_line, format_mask_line,
                                     read_mask_lines, rle_decode, rle_encode, tight_bbox,
                                     write_mask_lines)


def dense_iou(a, b):
    a, b = a.astype(bool), b.astype(bool)
    return (a & b).sum() / (a | b).sum()


def test_encode_examples():
    bm = np.zeros((2, 2), dtype=np.uint8)
    bm[1, 0] = 1
    assert rle_encode(bm).counts == (1, 1, 2)
    assert rle_encode(np.ones((2, 2))).counts == (0, 4)


def test_decode_examples():
    assert not rle_decode(BinaryMask(2, 2, (4, 0))).any()
    d = rle_decode(BinaryMask(2, 2, (1, 2, 1)))
    assert d.tolist() == [[0, 1], [1, 0]]


def test_decode_rejects_bad_sum():
    with pytest.raises(MalformedRle):
        rle_decode(BinaryMask(2, 2, (1, 2)))


def test_round_trip_500_random():
    rng = np.random.default_rng(0)
    for _ in range(500):
        h, w = rng.integers(1, 20, size=2)
        dense = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        m = rle_encode(dense)
        assert sum(m.counts) == h * w
        assert all(c > 0 for c in m.counts[1:])
        assert np.array_equal(rle_decode(m), dense)


@settings(max_examples=200, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
def test_round_trip_property(dense):
    assert np.array_equal(rle_decode(rle_encode(dense)), dense)


def test_iou_examples():
    a = np.zeros((3, 3), dtype=np.uint8)
    a[0, 0] = 1
    b = a.copy()
    b[1, 0] = 1
    ma, mb = rle_encode(a), rle_encode(b)
    assert mask_iou(ma, ma) == 1.0
    assert mask_iou(ma, mb) == 0.5
    c = np.zeros((3, 3), dtype=np.uint8)
    c[2, 2] = 1
    assert mask_iou(ma, rle_encode(c)) == 0.0


def test_iou_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        mask_iou(rle_encode(np.ones((2, 2))), rle_encode(np.ones((2, 3))))


def test_run_iou_equals_dense_iou():
    rng = np.random.default_rng(1)
    for _ in range(500):
        h, w = rng.integers(1, 16, size=2)
        a = rng.random((h, w)) < rng.random()
        b = rng.random((h, w)) < rng.random()
        a.flat[rng.integers(a.size)] = True
        b.flat[rng.integers(b.size)] = True
        iou = mask_iou(rle_encode(a), rle_encode(b))
        assert iou == dense_iou(a, b)
        assert iou == mask_iou(rle_encode(b), rle_encode(a))


def test_tight_bbox_examples():
    d = np.zeros((10, 10), dtype=np.uint8)
    d[3, 5] = 1
    assert tight_bbox(rle_encode(d)) == BBox(5, 3, 6, 4)
    assert tight_bbox(rle_encode(np.ones((7, 9)))) == BBox(0, 0, 9, 7)
    with pytest.raises(EmptyMask):
        tight_bbox(rle_encode(np.zeros((4, 4))))


def test_tight_bbox_exhaustive_scan():
    rng = np.random.default_rng(2)
    for _ in range(300):
        h, w = rng.integers(1, 15, size=2)
        d = rng.random((h, w)) < rng.random() * 0.3
        d.flat[rng.integers(d.size)] = True
        b = tight_bbox(rle_encode(d))
        rows, cols = np.nonzero(d)
        assert b == BBox(cols.min(), rows.min(), cols.max() + 1, rows.max() + 1)
        # every edge is touched by a foreground pixel
        assert d[:, b.x0].any() and d[:, b.x1 - 1].any()
        assert d[b.y0, :].any() and d[b.y1 - 1, :].any()


def test_enlarge_bbox_examples():
    b = BBox(10, 10, 30, 20)
    assert enlarge_bbox(b, 0.0, 100, 100) == b
    assert enlarge_bbox(b, 0.2, 1000, 1000) == BBox(6, 8, 34, 22)
    corner = enlarge_bbox(BBox(0, 0, 5, 5), 0.5, 6, 6)
    assert corner == BBox(0, 0, 6, 6)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(1, 30), st.integers(1, 30),
       st.floats(0, 2))
def test_enlarge_contains_input(x0, y0, w, h, k):
    b = BBox(x0, y0, x0 + w, y0 + h)
    e = enlarge_bbox(b, k, 100, 100)
    assert e.contains(b)
    assert 0 <= e.x0 and 0 <= e.y0 and e.x1 <= 100 and e.y1 <= 100


def test_mask_line_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    obs = []
    for f in range(4):
        d = rng.random((6, 5)) < 0.4
        d[0, 0] = True
        obs.append(InstanceObservation(f, 2, rle_encode(d), None if f == 2 else 7))
    p = tmp_path / "m.txt"
    write_mask_lines(p, obs)
    assert read_mask_lines(p) == obs
    line = format_mask_line(obs[2])
    assert line.split()[1] == "-1"
    assert parse_mask_line(line) == obs[2]
