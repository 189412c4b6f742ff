import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebev.geometry import GridSpec2D, Vec3
from sparsebev.grid import SparseGrid2D
from sparsebev.head import (Box3D, Detection, Heatmap, HeadWeights, decode_boxes, detect, detections_to_jsonl,
                            evaluate, select_peaks, select_peaks_bruteforce, sigmoid)

SPEC = GridSpec2D(0.0, 0.0, 1.0, 10, 10)


def test_sigmoid_stable():
    v = sigmoid([-1000.0, 0.0, 1000.0])
    assert np.allclose(v, [0.0, 0.5, 1.0]) and np.all(np.isfinite(v))


@given(st.integers(0, 10_000), st.integers(1, 3))
@settings(max_examples=80, deadline=None)
def test_peaks_match_bruteforce_with_ties(seed, radius):
    rng = np.random.default_rng(seed)
    ids = np.flatnonzero(rng.uniform(size=100) < 0.5)
    scores = rng.integers(0, 4, size=(len(ids), 2)) / 4.0  # heavy ties
    hm = Heatmap(SPEC, ids, scores)
    assert select_peaks(hm, radius, 0.25) == select_peaks_bruteforce(hm, radius, 0.25)


def test_plateau_yields_single_peak():
    hm = Heatmap(SPEC, np.array([11, 12, 21, 22]), np.full((4, 1), 0.9))
    assert select_peaks(hm, 1, 0.5) == [(11, 0, 0.9)]


def test_peak_ordering_and_cap():
    hm = Heatmap(SPEC, np.array([0, 5, 50, 99]), np.array([[0.6], [0.9], [0.9], [0.7]]))
    peaks = select_peaks(hm, 1, 0.5)
    assert [p[0] for p in peaks] == [5, 50, 99, 0]
    assert len(select_peaks(hm, 1, 0.5, max_out=2)) == 2
    with pytest.raises(ValueError):
        select_peaks(hm, 0)


def test_decode_offsets_and_dims():
    g = SparseGrid2D.from_coords(SPEC, np.array([[3, 4]]), np.array([[1.0, 0.0]]))
    w = HeadWeights.zeros(1, 2)
    w.reg_b[:] = [0.25, -2.0, 0.8, math.log(4.0), math.log(2.0), math.log(1.5), 0.3]
    (d,) = decode_boxes([(43, 0, 0.9)], g, w)
    assert d.center == pytest.approx((3.75, 4.0, 0.8))  # dy clamped to -0.5 cell
    assert (d.l, d.w, d.h, d.yaw) == pytest.approx((4.0, 2.0, 1.5, 0.3))
    assert d.cell == (3, 4)


def test_detect_end_to_end():
    g = SparseGrid2D.from_coords(SPEC, np.array([[2, 2], [2, 3], [7, 7]]), np.array([[3.0], [1.0], [2.0]]))
    w = HeadWeights(np.array([[1.0]]), np.array([-1.5]), np.zeros((7, 1)), np.zeros(7))
    dets = detect(g, w, radius=1, threshold=0.5)
    assert [d.cell for d in dets] == [(2, 2), (7, 7)]


def _box(x, y, cls=0):
    return Box3D(Vec3(x, y, 0.0), 1, 1, 1, 0.0, cls)


def _det(x, y, score, cls=0):
    return Detection(Vec3(x, y, 0.0), 1, 1, 1, 0.0, cls, score)


def test_evaluate_perfect_and_misses():
    gts = [_box(0, 0), _box(10, 0)]
    r = evaluate([_det(0.5, 0, 0.9), _det(10, 0.5, 0.8)], gts)
    assert (r.precision, r.recall, r.ap) == (1.0, 1.0, 1.0)
    r = evaluate([_det(50, 0, 0.95), _det(0, 0, 0.9)], gts)
    assert (r.precision, r.recall) == (0.5, 0.5)
    assert r.ap == pytest.approx(0.5 * 0.5)
    r = evaluate([_det(0, 0, 0.9, cls=1)], gts)
    assert r.tp == 0


def test_evaluate_each_gt_matched_once():
    r = evaluate([_det(0, 0, 0.9), _det(0.1, 0, 0.8)], [_box(0, 0)])
    assert (r.tp, r.precision) == (1, 0.5)


def test_evaluate_empty_conventions():
    assert evaluate([], []).precision == 1.0
    assert evaluate([_det(0, 0, 0.9)], []).precision == 0.0
    r = evaluate([], [_box(0, 0)])
    assert (r.precision, r.recall, r.ap) == (0.0, 0.0, 0.0)


def test_box_corners():
    b = Box3D(Vec3(1.0, 2.0, 0.5), 4.0, 2.0, 1.0, math.pi / 2, 0)
    c = b.corners()
    assert c.shape == (8, 3)
    assert c[:, 0].min() == pytest.approx(0.0) and c[:, 0].max() == pytest.approx(2.0)
    assert c[:, 1].min() == pytest.approx(0.0) and c[:, 1].max() == pytest.approx(4.0)
    assert Box3D.from_dict(b.to_dict()) == b


def test_jsonl_format():
    out = detections_to_jsonl([(3, [_det(1, 2, 0.5)])], "abc")
    assert out.endswith("\n") and out.count("\n") == 1
    assert '"config_hash": "abc"' in out and '"frame_id": 3' in out
