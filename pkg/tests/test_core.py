import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopsim.core import (
    WORLD,
    BoundingBox3D,
    GmmComponent,
    GmmStep,
    GmmTrajectory,
    Pose2D,
    bivariate_normal_logpdf,
    gmm_density,
    iou_3d,
    iou_bev,
    iou_matrix,
    transform_box,
    transform_gmm,
    transform_points,
    wrap_angle,
)
from oracles import gmm_grid_mass, iou_scanline, normal2_pdf, transform_point

coord = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
extent = st.floats(0.5, 6, allow_nan=False)


@st.composite
def boxes(draw, near=None):
    x = draw(coord) if near is None else near.x + draw(st.floats(-3, 3))
    y = draw(coord) if near is None else near.y + draw(st.floats(-3, 3))
    return BoundingBox3D(x, y, draw(st.floats(0, 2)), draw(angle), draw(extent), draw(extent), draw(st.floats(0.5, 3)))


@st.composite
def box_pairs(draw):
    a = draw(boxes())
    return a, draw(boxes(near=a))


def poses():
    return st.builds(Pose2D, coord, coord, angle)


# -- angles and poses ---------------------------------------------------------

def test_wrap_angle_range_and_pi():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    arr = wrap_angle(np.linspace(-20, 20, 101))
    assert np.all(arr > -math.pi) and np.all(arr <= math.pi)


def test_pose_yaw_normalised():
    assert Pose2D(0, 0, 2 * math.pi + 0.5).yaw == pytest.approx(0.5)


def test_box_rejects_bad_extents_and_score():
    with pytest.raises(ValueError):
        BoundingBox3D(0, 0, 0, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        BoundingBox3D(0, 0, 0, 0, 1, 1, 1, score=1.5)


# -- transforms -----------------------------------------------------------------

def test_transform_identity():
    b = BoundingBox3D(3, -2, 0.5, 0.7, 4, 2, 1.5, 0.9)
    p = Pose2D(5, 6, 1.1)
    out = transform_box(b, p, p)
    assert out.as_array() == pytest.approx(b.as_array(), abs=1e-12)


def test_transform_pure_translation():
    b = BoundingBox3D(15, 0, 0, 0, 4, 2, 1.5)
    out = transform_box(b, Pose2D(0, 0, 0), Pose2D(10, 0, 0))
    assert out.x == pytest.approx(5.0)
    assert out.y == pytest.approx(0.0)


def test_transform_rotated_receiver_matches_homogeneous_oracle():
    b = BoundingBox3D(1, 0, 0, 0, 4, 2, 1.5)
    recv = Pose2D(0, 0, math.pi / 2)
    out = transform_box(b, WORLD, recv)
    exp = transform_point((1, 0), WORLD, recv)
    assert (out.x, out.y) == pytest.approx(tuple(exp), abs=1e-12)
    assert out.yaw == pytest.approx(-math.pi / 2)
    assert (out.z, out.l, out.w, out.h) == (b.z, b.l, b.w, b.h)


@settings(max_examples=200, deadline=None)
@given(coord, coord, poses(), poses())
def test_transform_points_matches_homogeneous_oracle(x, y, s, r):
    got = transform_points(np.array([x, y]), s, r)
    assert got == pytest.approx(transform_point((x, y), s, r), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(boxes(), poses(), poses())
def test_transform_round_trip(b, s, r):
    back = transform_box(transform_box(b, s, r), r, s)
    assert back.x == pytest.approx(b.x, abs=1e-9)
    assert back.y == pytest.approx(b.y, abs=1e-9)
    assert abs(wrap_angle(back.yaw - b.yaw)) < 1e-9


# -- IoU ------------------------------------------------------------------------

def test_iou_identical_is_one():
    b = BoundingBox3D(1, 2, 0.8, 0.3, 4.5, 2, 1.6)
    assert iou_3d(b, b) == pytest.approx(1.0)


def test_iou_far_apart_is_zero():
    a = BoundingBox3D(0, 0, 0, 0, 2, 2, 2)
    b = BoundingBox3D(100, 0, 0, 0, 2, 2, 2)
    assert iou_3d(a, b) == 0.0


def test_iou_unit_offset_is_one_third():
    a = BoundingBox3D(0, 0, 0, 0, 2, 2, 2)
    b = BoundingBox3D(1, 0, 0, 0, 2, 2, 2)
    assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)
    assert iou_scanline(a, b) == pytest.approx(1 / 3, abs=1e-3)


def test_iou_vertical_separation():
    a = BoundingBox3D(0, 0, 0, 0, 2, 2, 2)
    b = BoundingBox3D(0, 0, 1, 0, 2, 2, 2)
    assert iou_bev(a, b) == pytest.approx(1.0)
    assert iou_3d(a, b) == pytest.approx(1 / 3)
    assert iou_3d(a, BoundingBox3D(0, 0, 5, 0, 2, 2, 2)) == 0.0


@settings(max_examples=150, deadline=None)
@given(box_pairs())
def test_iou_matches_scanline_oracle(pair):
    a, b = pair
    assert iou_3d(a, b) == pytest.approx(iou_scanline(a, b), abs=1e-2)


@settings(max_examples=200, deadline=None)
@given(box_pairs())
def test_iou_symmetric_and_bounded(pair):
    a, b = pair
    v = iou_3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_3d(b, a), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(box_pairs(), angle, coord, coord)
def test_iou_rotation_invariant(pair, theta, cx, cy):
    a, b = pair
    frame = Pose2D(cx, cy, theta)
    ra, rb = transform_box(a, frame, WORLD), transform_box(b, frame, WORLD)
    assert iou_3d(ra, rb) == pytest.approx(iou_3d(a, b), abs=1e-9)


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    rows = [BoundingBox3D(*rng.uniform(-3, 3, 2), 0, rng.uniform(-3, 3), 4, 2, 1.5) for _ in range(5)]
    cols = [BoundingBox3D(*rng.uniform(-3, 3, 2), 0, rng.uniform(-3, 3), 4, 2, 1.5) for _ in range(4)]
    M = iou_matrix(rows, cols)
    assert M.shape == (5, 4)
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            assert M[i, j] == pytest.approx(iou_3d(a, b))
    assert iou_matrix([], cols).shape == (0, 4)


# -- Gaussian mixtures -------------------------------------------------------------

def step1(mx=0.0, my=0.0, sx=1.0, sy=1.0, rho=0.0):
    return GmmStep((GmmComponent(1.0, mx, my, sx, sy, rho),))


def test_density_at_mean_standard_normal():
    assert gmm_density((0, 0), step1()) == pytest.approx(1 / (2 * math.pi), abs=1e-12)
    assert gmm_density((0, 0), step1()) == pytest.approx(0.159155, abs=1e-6)


def test_density_off_mean_closed_form():
    assert gmm_density((1, 0), step1()) == pytest.approx(math.exp(-0.5) / (2 * math.pi), abs=1e-12)
    assert gmm_density((1, 0), step1()) == pytest.approx(normal2_pdf(1, 0, 0, 0, 1, 1, 0), abs=1e-12)


def test_density_mirrored_components():
    s = GmmStep((GmmComponent(0.5, -1, 0, 1, 1, 0), GmmComponent(0.5, 1, 0, 1, 1, 0)))
    one = normal2_pdf(1, 0, 0, 0, 1, 1, 0)
    assert gmm_density((0, 0), s) == pytest.approx(2 * 0.5 * one, abs=1e-12)


def test_density_vectorised_matches_pointwise():
    s = GmmStep((GmmComponent(0.3, -1, 2, 1.5, 0.5, 0.4), GmmComponent(0.7, 1, 0, 1, 2, -0.2)))
    pts = np.random.default_rng(0).normal(size=(20, 2))
    assert gmm_density(pts, s) == pytest.approx([gmm_density(p, s) for p in pts], rel=1e-12)


def test_density_rejects_unnormalised_weights():
    with pytest.raises(ValueError):
        GmmStep((GmmComponent(0.6, 0, 0, 1, 1, 0), GmmComponent(0.6, 1, 0, 1, 1, 0)))
    with pytest.raises(ValueError):
        gmm_density((0, 0), np.array([[0.5, 0, 0, 1, 1, 0]]))


def test_component_invariants():
    with pytest.raises(ValueError):
        GmmComponent(0.5, 0, 0, 0.0, 1, 0)
    with pytest.raises(ValueError):
        GmmComponent(0.5, 0, 0, 1, 1, 1.0)
    with pytest.raises(ValueError):
        GmmComponent(-0.1, 0, 0, 1, 1, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_density_integrates_to_one(K, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(K))
    rows = np.column_stack([w, rng.uniform(-5, 5, K), rng.uniform(-5, 5, K),
                            rng.uniform(0.3, 3, K), rng.uniform(0.3, 3, K), rng.uniform(-0.8, 0.8, K)])
    assert gmm_grid_mass(rows, lambda pts: gmm_density(pts, rows), n=500) == pytest.approx(1.0, abs=1e-3)


@settings(max_examples=100, deadline=None)
@given(coord, coord, st.floats(0.2, 5), st.floats(0.2, 5), st.floats(-0.95, 0.95))
def test_logpdf_matches_dense_oracle(dx, dy, sx, sy, rho):
    dx, dy = dx / 10, dy / 10
    got = bivariate_normal_logpdf(dx, dy, sx, sy, rho)
    assert math.exp(got) == pytest.approx(normal2_pdf(dx, dy, 0, 0, sx, sy, rho), rel=1e-9, abs=1e-300)


def test_trajectory_invariants():
    p = np.zeros((3, 2, 6))
    p[..., 0] = 0.5
    p[..., 3:5] = 1.0
    g = GmmTrajectory(p, 4, 9)
    assert (g.T, g.K) == (3, 2)
    assert g == GmmTrajectory.from_steps(g.steps, 4, 9)
    bad = p.copy()
    bad[1, 0, 0] = 0.7
    with pytest.raises(ValueError):
        GmmTrajectory(bad)
    with pytest.raises(ValueError):
        GmmTrajectory(np.zeros((0, 2, 6)))
    with pytest.raises(ValueError):
        GmmTrajectory.from_steps([step1(), GmmStep((GmmComponent(0.5, 0, 0, 1, 1), GmmComponent(0.5, 1, 1, 1, 1)))])


def test_transform_gmm_rotates_covariance():
    p = np.array([[[1.0, 2.0, 0.0, 2.0, 0.5, 0.0]]])
    g = GmmTrajectory(p)
    out = transform_gmm(g, Pose2D(0, 0, math.pi / 2), WORLD)
    row = out.params[0, 0]
    assert row[1:3] == pytest.approx([0.0, 2.0], abs=1e-12)
    assert row[3:5] == pytest.approx([0.5, 2.0], abs=1e-12)
    assert abs(row[5]) < 1e-9
