"""Geometry, frame transforms, rotated-box IoU and Gaussian-mixture primitives.

Everything here is a pure function of its inputs. Boxes and poses are small
frozen dataclasses; mixture trajectories keep their parameters in a single
``(T, K, 6)`` array so the heavier modules can stay vectorised.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
# column layout of a mixture parameter row
P, MU_X, MU_Y, SIGMA_X, SIGMA_Y, RHO = range(6)
WEIGHT_TOL = 1e-9
MIN_INTERSECTION_AREA = 1e-12


def wrap_angle(angle):
    """Map an angle (scalar or array) into (-pi, pi]."""
    if isinstance(angle, (float, int)):
        return float(angle - TWO_PI * math.ceil((angle - math.pi) / TWO_PI))
    wrapped = np.asarray(angle, dtype=float) - TWO_PI * np.ceil(
        (np.asarray(angle, dtype=float) - math.pi) / TWO_PI
    )
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def derive_rng(*keys) -> np.random.Generator:
    """Deterministic generator from a tuple of ints/strings.

    Used for per-(seed, CAV, frame) streams so results do not depend on
    call order.
    """
    entropy = []
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True, slots=True)
class Pose2D:
    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


WORLD = Pose2D(0.0, 0.0, 0.0)


@dataclass(frozen=True, slots=True)
class BoundingBox3D:
    """Oriented 3D box: center, heading, extents and a confidence score."""

    x: float
    y: float
    z: float
    yaw: float
    l: float
    w: float
    h: float
    score: float = 1.0

    def __post_init__(self):
        for name in ("x", "y", "z", "l", "w", "h", "score"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got l={self.l} w={self.w} h={self.h}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score must lie in [0, 1], got {self.score}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.yaw, self.l, self.w, self.h, self.score])

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "BoundingBox3D":
        return cls(*(float(v) for v in row[:8]))

    def with_score(self, score: float) -> "BoundingBox3D":
        return BoundingBox3D(self.x, self.y, self.z, self.yaw, self.l, self.w, self.h, score)

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


# ----------------------------------------------------------------------------
# frame transforms
# ----------------------------------------------------------------------------

def relative_transform(sender: Pose2D, receiver: Pose2D) -> tuple[float, float, float]:
    """Sender-to-receiver rigid motion.

    Returns ``(dyaw, tx, ty)`` such that a point ``p`` in the sender frame maps
    to ``R(dyaw) p + (tx, ty)`` in the receiver frame.
    """
    dyaw = sender.yaw - receiver.yaw
    c, s = math.cos(-receiver.yaw), math.sin(-receiver.yaw)
    dx, dy = sender.x - receiver.x, sender.y - receiver.y
    return dyaw, c * dx - s * dy, s * dx + c * dy


def transform_points(xy, sender: Pose2D, receiver: Pose2D) -> np.ndarray:
    """Re-express an ``(..., 2)`` array of sender-frame points in the receiver frame."""
    pts = np.asarray(xy, dtype=float)
    dyaw, tx, ty = relative_transform(sender, receiver)
    c, s = math.cos(dyaw), math.sin(dyaw)
    out = np.empty_like(pts)
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + tx
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + ty
    return out


def transform_box(box: BoundingBox3D, sender: Pose2D, receiver: Pose2D) -> BoundingBox3D:
    """Move a box from the sender's frame into the receiver's frame.

    z, extents and score are untouched; yaw picks up the relative rotation.
    """
    dyaw, tx, ty = relative_transform(sender, receiver)
    c, s = math.cos(dyaw), math.sin(dyaw)
    return BoundingBox3D(
        c * box.x - s * box.y + tx,
        s * box.x + c * box.y + ty,
        box.z,
        box.yaw + dyaw,
        box.l,
        box.w,
        box.h,
        box.score,
    )


def to_local(pose: Pose2D, xy) -> np.ndarray:
    return transform_points(xy, WORLD, pose)


def to_world(pose: Pose2D, xy) -> np.ndarray:
    return transform_points(xy, pose, WORLD)


# ----------------------------------------------------------------------------
# rotated box overlap
# ----------------------------------------------------------------------------

def box_corners(box: BoundingBox3D) -> list[tuple[float, float]]:
    """BEV footprint corners, counter-clockwise."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.l, 0.5 * box.w
    corners = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        corners.append((box.x + c * dx - s * dy, box.y + s * dx + c * dy))
    return corners


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_polygon(subject: list[tuple[float, float]], clip: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` against a convex CCW ``clip``."""
    output = subject
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        px, py = inputs[-1]
        p_side = ex * (py - ay) - ey * (px - ax)
        for qx, qy in inputs:
            q_side = ex * (qy - ay) - ey * (qx - ax)
            if q_side >= 0.0:
                if p_side < 0.0:
                    t = p_side / (p_side - q_side)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
                output.append((qx, qy))
            elif p_side >= 0.0:
                t = p_side / (p_side - q_side)
                output.append((px + t * (qx - px), py + t * (qy - py)))
            px, py, p_side = qx, qy, q_side
    return output


def bev_intersection_area(a: BoundingBox3D, b: BoundingBox3D) -> float:
    reach = 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w))
    if (a.x - b.x) ** 2 + (a.y - b.y) ** 2 >= reach * reach:
        return 0.0
    area = polygon_area(clip_polygon(box_corners(a), box_corners(b)))
    return area if area >= MIN_INTERSECTION_AREA else 0.0


def iou_bev(a: BoundingBox3D, b: BoundingBox3D) -> float:
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(1.0, max(0.0, inter / union))


def iou_3d(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """Volumetric IoU: yaw-aware BEV overlap times the vertical overlap."""
    inter_bev = bev_intersection_area(a, b)
    if inter_bev == 0.0:
        return 0.0
    z_lo = max(a.z - 0.5 * a.h, b.z - 0.5 * b.h)
    z_hi = min(a.z + 0.5 * a.h, b.z + 0.5 * b.h)
    if z_hi <= z_lo:
        return 0.0
    inter = inter_bev * (z_hi - z_lo)
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return min(1.0, max(0.0, inter / union))


def iou_matrix(rows: Sequence[BoundingBox3D], cols: Sequence[BoundingBox3D]) -> np.ndarray:
    out = np.zeros((len(rows), len(cols)))
    if not len(rows) or not len(cols):
        return out
    # cheap center-distance gate before polygon clipping
    rxy = np.array([[b.x, b.y] for b in rows])
    cxy = np.array([[b.x, b.y] for b in cols])
    rr = np.array([0.5 * math.hypot(b.l, b.w) for b in rows])
    cr = np.array([0.5 * math.hypot(b.l, b.w) for b in cols])
    d2 = ((rxy[:, None, :] - cxy[None, :, :]) ** 2).sum(-1)
    near = d2 < (rr[:, None] + cr[None, :]) ** 2
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = iou_3d(rows[i], cols[j])
    return out


# ----------------------------------------------------------------------------
# Gaussian mixtures
# ----------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class GmmComponent:
    p: float
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    rho: float = 0.0

    def __post_init__(self):
        if self.p < 0:
            raise ValueError(f"component weight must be >= 0, got {self.p}")
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            raise ValueError("component sigmas must be positive")
        if not abs(self.rho) < 1:
            raise ValueError(f"|rho| must be < 1, got {self.rho}")

    def as_row(self) -> tuple[float, ...]:
        return (self.p, self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.rho)


@dataclass(frozen=True)
class GmmStep:
    components: tuple[GmmComponent, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("a mixture step needs at least one component")
        total = math.fsum(c.p for c in comps)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"component weights sum to {total!r}, expected 1")

    @property
    def K(self) -> int:
        return len(self.components)

    def as_array(self) -> np.ndarray:
        return np.array([c.as_row() for c in self.components], dtype=float)

    @classmethod
    def from_array(cls, rows) -> "GmmStep":
        return cls(tuple(GmmComponent(*map(float, r)) for r in np.asarray(rows)))


def _validate_params(params: np.ndarray) -> None:
    if params.ndim != 3 or params.shape[2] != 6:
        raise ValueError(f"mixture parameters must have shape (T, K, 6), got {params.shape}")
    if params.shape[0] < 1 or params.shape[1] < 1:
        raise ValueError("mixture trajectory needs T >= 1 and K >= 1")
    if not np.isfinite(params).all():
        raise ValueError("mixture parameters must be finite")
    w = params[..., P]
    if w.min() < 0:
        raise ValueError("negative component weight")
    sums = w.sum(axis=1)
    if np.abs(sums - 1.0).max() > WEIGHT_TOL:
        raise ValueError(f"per-step weights must sum to 1, got {sums.min()!r}..{sums.max()!r}")
    if min(params[..., SIGMA_X].min(), params[..., SIGMA_Y].min()) <= 0:
        raise ValueError("component sigmas must be positive")
    if np.abs(params[..., RHO]).max() >= 1:
        raise ValueError("|rho| must be < 1")


@dataclass(frozen=True, eq=False)
class GmmTrajectory:
    """Per-agent forecast: ``params[t, k]`` = (p, mu_x, mu_y, sigma_x, sigma_y, rho).

    Step ``t`` (0-based) describes frame ``t_generated + t + 1``.
    """

    params: np.ndarray
    t_generated: int = 0
    agent_id: int = -1

    def __post_init__(self):
        arr = np.array(self.params, dtype=float)
        _validate_params(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "params", arr)

    @property
    def T(self) -> int:
        return self.params.shape[0]

    @property
    def K(self) -> int:
        return self.params.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return self.params[..., P]

    @property
    def means(self) -> np.ndarray:
        return self.params[..., MU_X:MU_Y + 1]

    @property
    def steps(self) -> list[GmmStep]:
        return [GmmStep.from_array(self.params[t]) for t in range(self.T)]

    @classmethod
    def from_steps(cls, steps: Iterable[GmmStep], t_generated: int = 0, agent_id: int = -1) -> "GmmTrajectory":
        steps = list(steps)
        ks = {s.K for s in steps}
        if len(ks) != 1:
            raise ValueError(f"all steps must share K, got {sorted(ks)}")
        return cls(np.stack([s.as_array() for s in steps]), t_generated, agent_id)

    def __eq__(self, other):
        if not isinstance(other, GmmTrajectory):
            return NotImplemented
        return (
            self.t_generated == other.t_generated
            and self.agent_id == other.agent_id
            and self.params.shape == other.params.shape
            and bool(np.array_equal(self.params, other.params))
        )

    __hash__ = None


def bivariate_normal_pdf(dx, dy, sigma_x, sigma_y, rho):
    """Density of a zero-mean correlated bivariate normal at offset (dx, dy)."""
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    one_m_r2 = 1.0 - np.asarray(rho, dtype=float) ** 2
    zx = dx / sigma_x
    zy = dy / sigma_y
    q = (zx * zx - 2.0 * rho * zx * zy + zy * zy) / one_m_r2
    return np.exp(-0.5 * q) / (TWO_PI * sigma_x * sigma_y * np.sqrt(one_m_r2))


def bivariate_normal_logpdf(dx, dy, sigma_x, sigma_y, rho):
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    one_m_r2 = 1.0 - np.asarray(rho, dtype=float) ** 2
    zx = dx / sigma_x
    zy = dy / sigma_y
    q = (zx * zx - 2.0 * rho * zx * zy + zy * zy) / one_m_r2
    return -0.5 * q - np.log(TWO_PI * sigma_x * sigma_y * np.sqrt(one_m_r2))


def gmm_density(point, step):
    """Mixture density at a 2D point, or at each row of an (N, 2) array.

    Args:
        point: one (x, y) pair, or an (N, 2) array of them.
        step: a GmmStep or a (K, 6) parameter array.

    Returns:
        A float for a single point, else an (N,) array.
    """
    rows = step.as_array() if isinstance(step, GmmStep) else np.asarray(step, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != 6 or rows.shape[0] < 1:
        raise ValueError(f"expected (K, 6) mixture parameters, got {rows.shape}")
    total = rows[:, P].sum()
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"component weights sum to {total!r}, expected 1")
    pts = np.asarray(point, dtype=float)
    if pts.ndim == 2:
        dens = bivariate_normal_pdf(
            pts[:, None, 0] - rows[:, MU_X], pts[:, None, 1] - rows[:, MU_Y], rows[:, SIGMA_X], rows[:, SIGMA_Y], rows[:, RHO]
        )
        return dens @ rows[:, P]
    px, py = float(pts[0]), float(pts[1])
    dens = bivariate_normal_pdf(
        px - rows[:, MU_X], py - rows[:, MU_Y], rows[:, SIGMA_X], rows[:, SIGMA_Y], rows[:, RHO]
    )
    return float(np.dot(rows[:, P], dens))


def covariance_to_params(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``(..., 2, 2)`` covariances into (sigma_x, sigma_y, rho)."""
    sx = np.sqrt(cov[..., 0, 0])
    sy = np.sqrt(cov[..., 1, 1])
    rho = np.clip(cov[..., 0, 1] / (sx * sy), -0.999999, 0.999999)
    return sx, sy, rho


def params_to_covariance(sx, sy, rho) -> np.ndarray:
    sx = np.asarray(sx, dtype=float)
    sy = np.asarray(sy, dtype=float)
    rho = np.asarray(rho, dtype=float)
    cov = np.empty(sx.shape + (2, 2))
    cov[..., 0, 0] = sx * sx
    cov[..., 1, 1] = sy * sy
    cov[..., 0, 1] = cov[..., 1, 0] = rho * sx * sy
    return cov


def transform_gmm(g: GmmTrajectory, sender: Pose2D, receiver: Pose2D) -> GmmTrajectory:
    """Re-express a mixture trajectory in another frame (means and covariances)."""
    dyaw, _, _ = relative_transform(sender, receiver)
    params = np.array(g.params)
    params[..., MU_X:MU_Y + 1] = transform_points(params[..., MU_X:MU_Y + 1], sender, receiver)
    if dyaw != 0.0:
        c, s = math.cos(dyaw), math.sin(dyaw)
        rot = np.array([[c, -s], [s, c]])
        cov = params_to_covariance(params[..., SIGMA_X], params[..., SIGMA_Y], params[..., RHO])
        cov = rot @ cov @ rot.T
        sx, sy, rho = covariance_to_params(cov)
        params[..., SIGMA_X], params[..., SIGMA_Y], params[..., RHO] = sx, sy, rho
    return GmmTrajectory(params, g.t_generated, g.agent_id)
