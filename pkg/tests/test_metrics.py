import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import MultiPoint

from coopsim.core import P, BoundingBox3D, GmmTrajectory
from coopsim.metrics import (
    convex_hull,
    detection_pr,
    hull_area,
    hull_bin,
    prediction_ade_fde,
    relative_improvement,
    top_k_modes,
    tracking_metrics,
)
from oracles import fan_area, hull_area_triangulation, min_ade_fde_bruteforce


def car(x, y, score=1.0):
    return BoundingBox3D(x, y, 0.8, 0.0, 4.5, 2.0, 1.6, score)


# -- detection ---------------------------------------------------------------------

def test_perfect_detection():
    gts = [car(0, 0), car(20, 0)]
    r = detection_pr([car(0, 0, 0.9), car(20, 0, 0.8)], gts, 0.5)
    assert (r.ap, r.ar, r.f1) == (1.0, 1.0, 1.0)


def test_no_overlap_detection():
    r = detection_pr([car(50, 50, 0.9)], [car(0, 0)], 0.5)
    assert (r.ap, r.ar) == (0.0, 0.0)
    assert detection_pr([], [car(0, 0)], 0.5).ap == 0.0


def test_partial_recall():
    gts = [car(0, 0), car(20, 0), car(40, 0)]
    r = detection_pr([car(0, 0, 0.9), car(20, 0, 0.8)], gts, 0.5)
    assert r.ar == pytest.approx(2 / 3)
    assert r.ap == pytest.approx(2 / 3)


def test_false_positive_ranked_first_lowers_ap():
    gts = [car(0, 0)]
    r = detection_pr([car(50, 0, 0.9), car(0, 0, 0.5)], gts, 0.5)
    # precision 1/2 at recall 1
    assert r.ap == pytest.approx(0.5)
    assert r.ar == 1.0


def test_multi_frame_and_threshold_validation():
    r = detection_pr([[car(0, 0)], []], [[car(0, 0)], [car(5, 5)]], 0.5)
    assert r.ar == pytest.approx(0.5) and r.n_gt == 2
    with pytest.raises(ValueError):
        detection_pr([], [], 1.0)


# -- tracking ----------------------------------------------------------------------

def test_perfect_tracking():
    frames = [([(1, car(f, 0))], [(7, car(f, 0), 0.9)]) for f in range(5)]
    t = tracking_metrics(frames)
    assert (t.mota, t.motp, t.amota, t.mt, t.ml, t.idsw) == (1.0, 1.0, 1.0, 1.0, 0.0, 0)
    # tied scores keep every track at every recall level; the scaled score still tops out at 1
    assert t.samota == 1.0


def test_empty_tracker():
    frames = [([(1, car(f, 0))], []) for f in range(5)]
    t = tracking_metrics(frames)
    assert (t.mota, t.amota, t.ml, t.fn) == (0.0, 0.0, 1.0, 5)
    with pytest.raises(ValueError):
        tracking_metrics([([], [])])


def test_mota_one_miss_in_five():
    frames = [([(1, car(f, 0))], [] if f == 2 else [(7, car(f, 0), 0.9)]) for f in range(5)]
    assert tracking_metrics(frames).mota == pytest.approx(0.8)


def test_id_switch_counted():
    frames = [([(1, car(f, 0))], [(7 if f < 3 else 8, car(f, 0), 0.9)]) for f in range(5)]
    t = tracking_metrics(frames)
    assert t.idsw == 1
    assert t.mota == pytest.approx(0.8)


def test_scaled_amota_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        frames = []
        for f in range(6):
            gts = [(i, car(10 * i, 0)) for i in range(3)]
            trks = [(i, car(10 * i + rng.normal(0, 1), 0), float(rng.choice([0.5, 1.0]))) for i in range(int(rng.integers(0, 5)))]
            frames.append((gts, trks))
        t = tracking_metrics(frames)
        assert 0.0 <= t.samota <= 1.0
        assert t.amota <= 1.0


def test_false_positives_can_make_mota_negative():
    frames = [([(1, car(0, 0))], [(7, car(40, 0), 0.9), (8, car(80, 0), 0.9)])]
    assert tracking_metrics(frames).mota == pytest.approx(-2.0)


# -- prediction ----------------------------------------------------------------------

def modes_traj(means, weights):
    means = np.asarray(means, float)  # (K, T, 2)
    K, T, _ = means.shape
    p = np.zeros((T, K, 6))
    p[..., P] = np.asarray(weights)[None, :]
    p[..., 1] = means[..., 0].T
    p[..., 2] = means[..., 1].T
    p[..., 3:5] = 1.0
    return GmmTrajectory(p)


def test_ade_fde_example():
    T = 50
    gt = np.column_stack([np.arange(1, T + 1), np.zeros(T)])
    exact = gt.copy()
    off = gt + [0.0, 2.0]
    g = modes_traj([off, exact], [0.7, 0.3])
    ev = prediction_ade_fde(g, gt)
    assert ev.ade == {10: 0.0, 30: 0.0, 50: 0.0}
    only_top = prediction_ade_fde(g, gt, k=1)
    assert only_top.ade[50] == pytest.approx(2.0) and only_top.fde[10] == pytest.approx(2.0)


def test_ade_fde_growing_error():
    T = 50
    gt = np.zeros((T, 2))
    pred = np.column_stack([0.1 * np.arange(1, T + 1), np.zeros(T)])
    ev = prediction_ade_fde(modes_traj([pred], [1.0]), gt)
    assert ev.fde[10] == pytest.approx(1.0)
    assert ev.ade[10] == pytest.approx(0.55)
    assert ev.fde[50] == pytest.approx(5.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8), st.integers(1, 8))
def test_ade_fde_matches_bruteforce(seed, K, k):
    rng = np.random.default_rng(seed)
    T = 50
    p = np.zeros((T, K, 6))
    p[..., P] = rng.dirichlet(np.ones(K), size=T)
    p[..., 1:3] = rng.normal(0, 5, (T, K, 2))
    p[..., 3:5] = 1.0
    g = GmmTrajectory(p)
    gt = rng.normal(0, 5, (T, 2))
    ev = prediction_ade_fde(g, gt, k=k)
    for h in (10, 30, 50):
        ade, fde = min_ade_fde_bruteforce(p, gt, h, k)
        assert ev.ade[h] == pytest.approx(ade, abs=1e-9)
        assert ev.fde[h] == pytest.approx(fde, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_min_ade_non_increasing_in_k(seed):
    rng = np.random.default_rng(seed)
    p = np.zeros((50, 6, 6))
    p[..., P] = rng.dirichlet(np.ones(6))[None, :]
    p[..., 1:3] = rng.normal(0, 5, (50, 6, 2))
    p[..., 3:5] = 1.0
    g = GmmTrajectory(p)
    gt = rng.normal(0, 5, (50, 2))
    ades = [prediction_ade_fde(g, gt, k=k).ade[50] for k in range(1, 7)]
    assert all(a >= b - 1e-12 for a, b in zip(ades, ades[1:]))


def test_top_k_tie_break_by_index():
    g = modes_traj(np.arange(3 * 2 * 2).reshape(3, 2, 2), [0.25, 0.5, 0.25])
    m = top_k_modes(g, 2)
    assert m[0, 0] == pytest.approx([4, 5]) and m[1, 0] == pytest.approx([0, 1])


def test_ade_validation():
    g = modes_traj(np.zeros((1, 20, 2)), [1.0])
    with pytest.raises(ValueError):
        prediction_ade_fde(g, np.zeros((20, 2)))
    with pytest.raises(ValueError):
        prediction_ade_fde(modes_traj(np.zeros((1, 50, 2)), [1.0]), np.zeros((20, 2)))


# -- hull ------------------------------------------------------------------------

def test_hull_examples():
    assert hull_area([(0, 0), (10, 0), (0, 10)]) == pytest.approx(50.0)
    assert hull_area([(0, 0), (10, 0)]) == 0.0
    assert hull_area([(0, 0), (5, 0), (10, 0)]) == 0.0
    assert hull_area([(0, 0), (4, 0), (4, 4), (0, 4), (2, 2)]) == pytest.approx(16.0)
    assert hull_bin(0.0) == "<50"
    assert hull_bin(50.0) == "50-200"
    assert hull_bin(199.9) == "50-200"
    assert hull_bin(200.0) == ">200"
    with pytest.raises(ValueError):
        hull_bin(-1.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=12))
def test_hull_area_matches_shapely_and_triangulation(pts):
    a = hull_area(pts)
    assert a == pytest.approx(MultiPoint(pts).convex_hull.area, rel=1e-9, abs=1e-6)
    assert a == pytest.approx(hull_area_triangulation(pts), rel=1e-6, abs=1e-6)
    hull = convex_hull(pts)
    if len(hull) >= 3:
        assert fan_area(hull) == pytest.approx(a, rel=1e-9, abs=1e-9)


def test_relative_improvement_example():
    assert relative_improvement(2.1095, 1.7472) == pytest.approx(0.1717, abs=5e-5)
    assert round(100 * relative_improvement(2.1095, 1.7472), 1) == 17.2
    assert relative_improvement(0.0, 1.0) == 0.0
