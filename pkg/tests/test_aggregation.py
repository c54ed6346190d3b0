import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopsim.aggregation import (
    AggregationConfig,
    PredictionBundle,
    ReliabilityFeatures,
    aggregate,
    align_delayed,
    match_agents,
    source_weights,
)
from coopsim.core import MU_X, MU_Y, P, GmmTrajectory, Pose2D, WORLD
from oracles import greedy_by_distance

REL = ReliabilityFeatures(10.0, 0.9, 5)


def traj(means, sigma=1.0, weights=None, t=0, aid=0):
    """means: (K, T, 2)."""
    means = np.asarray(means, float)
    K, T, _ = means.shape
    p = np.zeros((T, K, 6))
    p[..., P] = (np.ones(K) / K) if weights is None else np.asarray(weights)[None, :]
    p[..., MU_X] = means[..., 0].T
    p[..., MU_Y] = means[..., 1].T
    p[..., 3:5] = sigma
    return GmmTrajectory(p, t, aid)


def line(x0, y0, T=5, vx=1.0):
    return [[x0 + vx * (t + 1), y0] for t in range(T)]


def test_align_example():
    g = traj([line(0, 0, T=3)], t=4)
    a = align_delayed(g, 5)
    assert a.t_generated == 5
    assert a.params[:, 0, MU_X] == pytest.approx([2.0, 3.0, 4.0])
    assert a.params[:, 0, 3] == pytest.approx([1.0, 1.0, 1.0])


def test_align_extrapolates_growing_sigma():
    g = traj([line(0, 0, T=3)], t=4)
    p = np.array(g.params)
    p[:, 0, 3] = [1.0, 1.5, 2.0]
    a = align_delayed(GmmTrajectory(p, 4), 5)
    assert a.params[-1, 0, 3] == pytest.approx(2.5)
    with pytest.raises(ValueError):
        align_delayed(g, 7)


def test_match_agents_examples():
    ego = {1: (0, 0), 2: (10, 0)}
    rem = {7: (0.5, 0), 8: (10, 2.5), 9: (50, 0)}
    assert match_agents(ego, rem, gate=3.0) == {1: 7, 2: 8}
    assert match_agents(ego, rem, gate=2.0) == {1: 7}
    assert match_agents({}, rem) == {}


def test_match_agents_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        ego = {i: tuple(rng.uniform(0, 10, 2)) for i in range(rng.integers(0, 6))}
        rem = {10 + j: tuple(rng.uniform(0, 10, 2)) for j in range(rng.integers(0, 6))}
        ek, rk = list(ego), list(rem)
        D = np.array([[math.dist(ego[e], rem[r]) for r in rk] for e in ek]).reshape(len(ek), len(rk))
        exp = {ek[i]: rk[j] for i, j in greedy_by_distance(D, 3.0)}
        assert match_agents(ego, rem, 3.0) == exp


def test_source_weights_formula():
    rel = [ReliabilityFeatures(0.0, 1.0, 10), ReliabilityFeatures(20.0, 0.5, 2)]
    w = source_weights(rel, 0.05, 1.0)
    l0, l1 = 1.0, -1.0 + 0.5
    assert w == pytest.approx(np.exp([l0, l1]) / np.exp([l0, l1]).sum())
    wg = source_weights(rel, 0.05, 1.0, gamma=2.0, length_cap=10)
    l0, l1 = l0 + 2.0, l1 + 0.4
    assert wg == pytest.approx(np.exp([l0, l1]) / np.exp([l0, l1]).sum())


def test_aggregate_without_remotes_is_identity():
    g = traj([line(0, 0), line(0, 5)])
    assert aggregate(g, [], [REL]) is g


def test_aggregate_with_identical_remote_is_idempotent():
    g = traj([line(0, 0), line(0, 10), line(0, -10)], weights=[0.5, 0.3, 0.2])
    out = aggregate(g, [g], [REL, ReliabilityFeatures(30.0, 0.4)])
    assert out.params == pytest.approx(np.asarray(g.params), abs=1e-9)


def moment_oracle(comps, ws):
    """comps: list of (mean (T,2), sigma scalar); ws: source weights."""
    a = np.asarray(ws) / np.sum(ws)
    mu = sum(ai * c[0] for ai, c in zip(a, comps))
    var = [sum(ai * (c[1] ** 2 + (c[0][t] - mu[t]) ** 2) for ai, c in zip(a, comps)) for t in range(len(mu))]
    return mu, np.array(var)


def test_near_components_merge_by_moment_matching():
    ego = traj([line(0, 0)])
    rem = traj([line(0, 1.0)], sigma=2.0)
    rel = [ReliabilityFeatures(5.0, 0.9), ReliabilityFeatures(25.0, 0.6)]
    out = aggregate(ego, [rem], rel)
    ws = source_weights(rel, 0.05, 1.0)
    mu, var = moment_oracle([(np.array(line(0, 0)), 1.0), (np.array(line(0, 1.0)), 2.0)], ws)
    assert out.params[:, 0, [MU_X, MU_Y]] == pytest.approx(mu)
    assert out.params[:, 0, 3] ** 2 == pytest.approx(var[:, 0])
    assert out.params[:, 0, 4] ** 2 == pytest.approx(var[:, 1])
    assert out.params[:, 0, P] == pytest.approx(1.0)


def test_far_components_compete_for_slots():
    ego = traj([line(0, 0)])
    rem = traj([line(0, 20)])
    strong = [ReliabilityFeatures(50.0, 0.2), ReliabilityFeatures(1.0, 1.0)]
    out = aggregate(ego, [rem], strong)
    assert out.params[:, 0, MU_Y] == pytest.approx(20.0)  # remote wins the single slot
    weak = [ReliabilityFeatures(1.0, 1.0), ReliabilityFeatures(50.0, 0.2)]
    assert aggregate(ego, [rem], weak).params[:, 0, MU_Y] == pytest.approx(0.0)


def test_far_components_weights_follow_sources():
    ego = traj([line(0, 0), line(0, 40)], weights=[0.9, 0.1])
    rem = traj([line(0, 20), line(0, -40)], weights=[0.9, 0.1])
    rel = [ReliabilityFeatures(10.0, 0.8), ReliabilityFeatures(10.0, 0.8)]
    out = aggregate(ego, [rem], rel)
    ys = sorted(out.params[0, :, MU_Y])
    assert ys == pytest.approx([0.0, 20.0])
    assert out.params[0, :, P] == pytest.approx([0.5, 0.5])


def random_traj(rng, K=3, T=6, t=0):
    p = np.zeros((T, K, 6))
    p[..., P] = rng.dirichlet(np.ones(K))[None, :]
    p[..., MU_X] = np.cumsum(rng.uniform(0.5, 1.5, (T, K)), axis=0) + rng.uniform(-3, 3, K)
    p[..., MU_Y] = rng.uniform(-3, 3, K)[None, :]
    p[..., 3:5] = rng.uniform(0.5, 2, (T, K, 2))
    p[..., 5] = rng.uniform(-0.5, 0.5, (T, K))
    return GmmTrajectory(p, t)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4))
def test_output_on_simplex_and_keeps_shape(seed, n_remote):
    rng = np.random.default_rng(seed)
    ego = random_traj(rng)
    remotes = [random_traj(rng) for _ in range(n_remote)]
    rel = [ReliabilityFeatures(rng.uniform(0, 60), rng.uniform(0, 1), int(rng.integers(0, 20))) for _ in range(n_remote + 1)]
    out = aggregate(ego, remotes, rel)
    assert out.params.shape == ego.params.shape
    assert np.all(out.params[..., P] >= 0)
    assert out.params[..., P].sum(axis=1) == pytest.approx(np.ones(ego.T))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_remote_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    ego = random_traj(rng)
    remotes = [random_traj(rng) for _ in range(3)]
    rel = [ReliabilityFeatures(rng.uniform(0, 60), rng.uniform(0, 1)) for _ in range(4)]
    base = aggregate(ego, remotes, rel).params
    for perm in itertools.permutations(range(3)):
        out = aggregate(ego, [remotes[i] for i in perm], [rel[0]] + [rel[i + 1] for i in perm])
        assert out.params == pytest.approx(np.asarray(base), abs=1e-9)


def test_aggregate_input_validation():
    g = traj([line(0, 0)])
    with pytest.raises(ValueError):
        aggregate(g, [g], [REL])
    with pytest.raises(ValueError):
        aggregate(g, [traj([line(0, 0, T=4)])], [REL, REL])
    with pytest.raises(ValueError):
        aggregate(None, [], [])


def test_bundle_payload_and_frame_change():
    g = traj([line(0, 0), line(0, 5)])
    b = PredictionBundle(3, 9, Pose2D(10, 0, math.pi / 2), {4: g})
    assert b.payload_bytes == g.params.size * 4 + 64
    w = b.in_frame(WORLD)[4]
    assert w.params[0, 0, [MU_X, MU_Y]] == pytest.approx([10.0, 1.0])
    with pytest.raises(ValueError):
        PredictionBundle(3, 9, WORLD, {1: g, 2: traj([line(0, 0)])})


def test_merge_gate_widens_with_spread():
    ego = traj([line(0, 0)], sigma=1.0)
    rem = traj([line(0, 2.9)], sigma=1.0)
    rel = [ReliabilityFeatures(10.0, 0.8), ReliabilityFeatures(10.0, 0.8)]
    # gate = 1 m + 2 * 1 m: the pair merges, so the single slot sits halfway
    assert aggregate(ego, [rem], rel).params[0, 0, MU_Y] == pytest.approx(1.45)
    tight = traj([line(0, 0)], sigma=0.5), traj([line(0, 2.9)], sigma=0.5)
    # gate = 2 m: no merge, the ego component keeps the slot on the tie
    assert aggregate(tight[0], [tight[1]], rel).params[0, 0, MU_Y] == pytest.approx(0.0)
    fixed = AggregationConfig(merge_eps=3.0, merge_sigma=0.0)
    assert aggregate(tight[0], [tight[1]], rel, fixed).params[0, 0, MU_Y] == pytest.approx(1.45)
    with pytest.raises(ValueError):
        AggregationConfig(merge_sigma=-1.0)
