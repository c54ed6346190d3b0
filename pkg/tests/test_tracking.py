import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopsim.core import BoundingBox3D
from coopsim.tracking import (
    STATE_DIM,
    Association,
    KalmanState,
    Track,
    Tracker,
    TrackerConfig,
    associate,
    init_track,
    kf_predict,
    kf_update,
    lifecycle_step,
    track_histories,
)
from oracles import best_assignment, greedy_by_distance, kf_predict_dense, kf_update_information

CFG = TrackerConfig()


def car(x, y, yaw=0.0, score=0.9):
    return BoundingBox3D(x, y, 0.8, yaw, 4.5, 2.0, 1.6, score)


def track_with(mean, cov, tid=0):
    return Track(tid, KalmanState(np.array(mean, float), np.array(cov, float)))


def random_state(rng):
    mean = np.concatenate([rng.uniform(-20, 20, 3), [rng.uniform(-1, 1)], rng.uniform(1, 5, 3), rng.uniform(-5, 5, 3)])
    A = rng.standard_normal((STATE_DIM, STATE_DIM))
    return mean, A @ A.T + np.eye(STATE_DIM)


def test_predict_constant_velocity_example():
    mean = np.zeros(STATE_DIM)
    mean[4:7] = [4.5, 2, 1.6]
    mean[7:9] = [10.0, -2.0]
    t = kf_predict(track_with(mean, np.eye(STATE_DIM)), 0.1, CFG)
    assert t.state.mean[:2] == pytest.approx([1.0, -0.2])
    assert t.state.cov[0, 0] == pytest.approx(1 + 0.01 + CFG.q_pos)
    assert t.state.cov[0, 7] == pytest.approx(0.1)


@pytest.mark.parametrize("seed", range(20))
def test_predict_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    mean, cov = random_state(rng)
    mean[3] = 0.0
    mean[9] = 0.0  # keep yaw unwrapped
    got = kf_predict(track_with(mean, cov), 0.1, CFG)
    em, ec = kf_predict_dense(mean, cov, 0.1, CFG.Q)
    assert got.state.mean == pytest.approx(em, abs=1e-10)
    assert got.state.cov == pytest.approx(ec, abs=1e-9)


def test_update_equal_uncertainty_halves_innovation():
    cov = np.diag(np.concatenate([np.diag(CFG.R), [1.0] * 3]))
    mean = np.zeros(STATE_DIM)
    mean[4:7] = [4.5, 2.0, 1.6]
    t = kf_update(track_with(mean, cov), car(2.0, -1.0), CFG)
    assert t.state.mean[:3] == pytest.approx([1.0, -0.5, 0.4])
    assert t.state.cov[0, 0] == pytest.approx(CFG.r_pos / 2)


@pytest.mark.parametrize("seed", range(20))
def test_update_matches_information_form(seed):
    rng = np.random.default_rng(100 + seed)
    mean, cov = random_state(rng)
    mean[3] = 0.1
    z = car(*(mean[:2] + rng.normal(0, 1, 2)), yaw=0.3)
    z = BoundingBox3D(z.x, z.y, mean[2] + 0.1, 0.3, mean[4] + 0.1, mean[5], mean[6], 0.9)
    got = kf_update(track_with(mean, cov), z, CFG)
    em, ec = kf_update_information(mean, cov, np.array([z.x, z.y, z.z, z.yaw, z.l, z.w, z.h]), CFG.R)
    assert got.state.mean == pytest.approx(em, abs=1e-8)
    assert got.state.cov == pytest.approx(ec, abs=1e-8)


def test_update_yaw_wraps():
    mean = np.zeros(STATE_DIM)
    mean[3] = math.pi - 0.05
    mean[4:7] = [4.5, 2, 1.6]
    cov = np.diag(np.concatenate([np.diag(CFG.R), [1.0] * 3]))
    # -pi + 0.05 is 0.1 rad away across the wrap, not 2 pi - 0.1
    t = kf_update(track_with(mean, cov), car(0, 0, yaw=-math.pi + 0.05), CFG)
    assert t.state.mean[3] == pytest.approx(math.pi, abs=1e-9) or t.state.mean[3] == pytest.approx(-math.pi, abs=1e-9)
    # a measurement equal to the state plus 2 pi is no innovation at all
    t2 = kf_update(track_with(mean, cov), car(0, 0, yaw=mean[3] + 2 * math.pi), CFG)
    assert t2.state.mean[3] == pytest.approx(mean[3], abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_covariance_stays_spd(seed):
    rng = np.random.default_rng(seed)
    mean, cov = random_state(rng)
    t = track_with(mean, cov)
    for _ in range(10):
        kf_predict(t, 0.1, CFG)
        kf_update(t, car(*rng.uniform(-20, 20, 2)), CFG)
    P = t.state.cov
    assert np.allclose(P, P.T)
    assert np.linalg.eigvalsh(P).min() > 0


def test_association_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(300):
        nt, nd = rng.integers(0, 5), rng.integers(0, 5)
        tracks = [init_track(i, car(*rng.uniform(-8, 8, 2), yaw=rng.uniform(-3, 3)), 0, CFG) for i in range(nt)]
        dets = [car(*rng.uniform(-8, 8, 2), yaw=rng.uniform(-3, 3)) for _ in range(nd)]
        got = associate(tracks, dets, CFG)
        from coopsim.core import iou_matrix

        ious = iou_matrix([t.box for t in tracks], dets) if nt and nd else np.zeros((nt, nd))
        gain = np.where(ious >= CFG.iou_min, ious, 0.0)
        first = best_assignment(gain, CFG.iou_min) if nt and nd else set()
        got_first = {(i, j) for i, j in got.matches if ious[i, j] >= CFG.iou_min}
        assert sum(ious[p] for p in got_first) == pytest.approx(sum(ious[p] for p in first), abs=1e-9)
        ft = [i for i in range(nt) if i not in {p[0] for p in got_first}]
        fd = [j for j in range(nd) if j not in {p[1] for p in got_first}]
        dist = np.array([[math.hypot(tracks[i].box.x - dets[j].x, tracks[i].box.y - dets[j].y) for j in fd] for i in ft]).reshape(len(ft), len(fd))
        second = {(ft[a], fd[b]) for a, b in greedy_by_distance(dist, CFG.dist_max)}
        assert set(got.matches) == got_first | second
        assert sorted(got.unmatched_tracks + [m[0] for m in got.matches]) == list(range(nt))
        assert sorted(got.unmatched_detections + [m[1] for m in got.matches]) == list(range(nd))


def test_lifecycle_confirm_and_delete():
    trk = Tracker(CFG)
    for f in range(3):
        trk.step([car(f, 0)], f)
    assert [t.confirmed for t in trk.tracks] == [True]
    assert len(trk.reported()) == 1
    trk.step([], 3)
    assert len(trk.tracks) == 1 and trk.reported() == []
    assert trk.tracks[0].history[-1].predicted
    trk.step([], 4)
    assert trk.tracks == []


def test_lifecycle_births_get_fresh_ids():
    ids = itertools.count(10)
    tracks = [init_track(0, car(0, 0), 0, CFG)]
    out = lifecycle_step(tracks, Association([(0, 0)], [], [1]), [car(0, 0), car(40, 0)], 1, CFG, ids)
    assert [t.id for t in out] == [0, 10]
    assert out[0].hits == 2 and not out[0].confirmed


def test_ids_never_reused():
    trk = Tracker(CFG)
    seen = []
    for f in range(30):
        dets = [car(100 * (f // 4), 0)]  # object jumps away every 4 frames
        for t in trk.step(dets, f):
            if t.id not in seen:
                seen.append(t.id)
    assert seen == sorted(seen)
    assert len(seen) == len(set(seen)) >= 7


def test_histories():
    trk = Tracker(CFG, max_history=5)
    for f in range(8):
        trk.step([car(f, 0)], f)
    h = track_histories(trk.tracks, 7, 3)
    assert list(h) == [0]
    assert [e.frame for e in h[0]] == [5, 6, 7]
    assert len(trk.tracks[0].history) == 5
    with pytest.raises(ValueError):
        track_histories(trk.tracks, 7, 0)


def test_converges_on_constant_velocity():
    trk = Tracker(CFG)
    for f in range(40):
        trk.step([car(0.8 * f, 0.3 * f)], f)
    vx, vy = trk.tracks[0].velocity
    assert (vx, vy) == pytest.approx((8.0, 3.0), abs=0.05)


def test_frames_must_increase():
    trk = Tracker(CFG)
    trk.step([], 3)
    with pytest.raises(ValueError):
        trk.step([], 3)
