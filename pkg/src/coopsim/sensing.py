"""Surrogate per-CAV detector and detection-level cooperative fusion.

The detector sees a ground-truth box when it is in range and the sight line
from the sensor to the box center is not blocked by another vehicle's
footprint. Seen boxes are then dropped with a range-dependent miss rate and
perturbed with range-dependent Gaussian noise; Poisson clutter is added.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .core import WORLD, BoundingBox3D, Pose2D, derive_rng, iou_matrix, transform_box, wrap_angle
from .scenario import FrameTruth

MERGE_IOU = 0.3


@dataclass
class SensorConfig:
    max_range: float = 50.0
    sigma_pos: float = 0.1
    sigma_yaw: float = 0.02
    sigma_dim: float = 0.05
    # noise std grows as sigma * (1 + range / noise_range_scale)
    noise_range_scale: float = 25.0
    miss_rate_base: float = 0.05
    miss_rate_slope: float = 0.004
    fp_rate: float = 0.3
    fp_score_max: float = 0.5
    sigma_score: float = 0.1
    compression_sigma0: float = 0.3
    bev_h: int = 250
    bev_w: int = 250
    bev_c: int = 128
    bytes_per_value: int = 4

    def __post_init__(self):
        for name in ("miss_rate_base", "miss_rate_slope"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be >= 0")
        for name in ("sigma_pos", "sigma_yaw", "sigma_dim", "sigma_score", "compression_sigma0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @property
    def nominal_feature_bytes(self) -> int:
        return self.bev_h * self.bev_w * self.bev_c * self.bytes_per_value

    def miss_rate(self, rng_m):
        return np.clip(self.miss_rate_base + self.miss_rate_slope * np.asarray(rng_m), 0.0, 1.0)

    def compression_sigma(self, ratio: float) -> float:
        if ratio < 1:
            raise ValueError(f"compression ratio must be >= 1, got {ratio}")
        return self.compression_sigma0 * math.log2(ratio) / 8.0

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "SensorConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DetectionEvidence:
    """What one CAV shares: boxes in its own frame plus its pose at sensing time."""

    sender: int
    frame: int
    pose: Pose2D
    boxes: tuple[BoundingBox3D, ...]
    nominal_feature_bytes: float

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.nominal_feature_bytes > 0:
            raise ValueError("nominal_feature_bytes must be positive")


@dataclass(frozen=True)
class FusedDetections:
    ego: int
    frame: int
    boxes: tuple[BoundingBox3D, ...]


# ----------------------------------------------------------------------------
# visibility
# ----------------------------------------------------------------------------

def _footprints(boxes: Sequence[BoundingBox3D]) -> np.ndarray:
    return np.array([[b.x, b.y, b.yaw, 0.5 * b.l, 0.5 * b.w] for b in boxes], dtype=float).reshape(-1, 5)


def occlusion_matrix(origin, targets_xy: np.ndarray, occluders: np.ndarray) -> np.ndarray:
    """``hit[t, o]``: does footprint ``o`` cut the open segment origin -> target ``t``?

    ``occluders`` rows are (x, y, yaw, half_length, half_width).
    """
    targets_xy = np.asarray(targets_xy, dtype=float).reshape(-1, 2)
    if len(targets_xy) == 0 or len(occluders) == 0:
        return np.zeros((len(targets_xy), len(occluders)), dtype=bool)
    ox, oy = float(origin[0]), float(origin[1])
    c = np.cos(occluders[:, 2])
    s = np.sin(occluders[:, 2])
    # segment endpoints in each occluder's local frame: shape (T, O)
    ax = (ox - occluders[:, 0]) * c + (oy - occluders[:, 1]) * s
    ay = -(ox - occluders[:, 0]) * s + (oy - occluders[:, 1]) * c
    bx = (targets_xy[:, None, 0] - occluders[None, :, 0]) * c + (targets_xy[:, None, 1] - occluders[None, :, 1]) * s
    by = -(targets_xy[:, None, 0] - occluders[None, :, 0]) * s + (targets_xy[:, None, 1] - occluders[None, :, 1]) * c
    ax = np.broadcast_to(ax, bx.shape)
    ay = np.broadcast_to(ay, by.shape)
    lo = np.zeros(bx.shape)
    hi = np.ones(bx.shape)
    for a, b, half in ((ax, bx, occluders[:, 3]), (ay, by, occluders[:, 4])):
        d = b - a
        flat = np.abs(d) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - a) / d
            t2 = (half - a) / d
        inside = np.abs(a) < half
        t_lo = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        t_hi = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        lo = np.maximum(lo, t_lo)
        hi = np.minimum(hi, t_hi)
    return hi - lo > 1e-9


def visible(cav: Pose2D, target: BoundingBox3D, others: Sequence[BoundingBox3D], max_range: float) -> bool:
    """In range, and no other footprint crosses the sight line to the target center."""
    if math.hypot(target.x - cav.x, target.y - cav.y) > max_range:
        return False
    if not others:
        return True
    hit = occlusion_matrix((cav.x, cav.y), np.array([[target.x, target.y]]), _footprints(others))
    return not bool(hit.any())


def visibility_mask(cav: Pose2D, boxes: Sequence[BoundingBox3D], max_range: float, exclude: int | None = None) -> np.ndarray:
    """Vectorised ``visible`` for every box, each occluded by all the others.

    ``exclude`` indexes a box (the observer's own) that is neither a target nor an occluder.
    """
    n = len(boxes)
    mask = np.zeros(n, dtype=bool)
    if n == 0:
        return mask
    fp = _footprints(boxes)
    rng = np.hypot(fp[:, 0] - cav.x, fp[:, 1] - cav.y)
    hit = occlusion_matrix((cav.x, cav.y), fp[:, :2], fp)
    np.fill_diagonal(hit, False)
    if exclude is not None:
        hit[:, exclude] = False
    mask = (rng <= max_range) & ~hit.any(axis=1)
    if exclude is not None:
        mask[exclude] = False
    return mask


# ----------------------------------------------------------------------------
# detector
# ----------------------------------------------------------------------------

def _nms(boxes: list[BoundingBox3D], thresh: float) -> list[BoundingBox3D]:
    if len(boxes) < 2:
        return boxes
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    ious = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for i in order:
        if all(ious[i, j] < thresh for j in kept):
            kept.append(i)
    return [boxes[i] for i in sorted(kept)]


def sense_local(
    cav: Pose2D,
    truth: FrameTruth,
    cfg: SensorConfig,
    seed: int,
    cav_id: int | None = None,
) -> DetectionEvidence:
    """Noisy detections of the visible ground truth, in the CAV's own frame.

    The random stream is keyed on ``(seed, cav_id, frame)`` so results do not
    depend on the order in which CAVs are sensed.
    """
    rng = derive_rng(seed, -1 if cav_id is None else cav_id, truth.frame, "sense")
    ids = [aid for aid, _ in truth.boxes]
    gt = [b for _, b in truth.boxes]
    own = ids.index(cav_id) if cav_id is not None and cav_id in ids else None
    mask = visibility_mask(cav, gt, cfg.max_range, exclude=own)

    out: list[BoundingBox3D] = []
    for i in np.nonzero(mask)[0]:
        local = transform_box(gt[i], WORLD, cav)
        r = math.hypot(local.x, local.y)
        miss = float(cfg.miss_rate(r))
        u, nx, ny, nyaw, nl, nw, nh, ns = rng.random(), *rng.standard_normal(7)
        if u < miss:
            continue
        gain = 1.0 + r / cfg.noise_range_scale
        sp = cfg.sigma_pos * gain
        score = min(1.0, max(0.01, 1.0 - miss - abs(ns) * cfg.sigma_score))
        out.append(
            BoundingBox3D(
                local.x + sp * nx,
                local.y + sp * ny,
                local.z,
                local.yaw + cfg.sigma_yaw * gain * nyaw,
                max(0.1, local.l + cfg.sigma_dim * nl),
                max(0.1, local.w + cfg.sigma_dim * nw),
                max(0.1, local.h + cfg.sigma_dim * nh),
                score,
            )
        )
    n_fp = int(rng.poisson(cfg.fp_rate)) if cfg.fp_rate > 0 else 0
    for _ in range(n_fp):
        r = cfg.max_range * math.sqrt(rng.random())
        th = rng.uniform(-math.pi, math.pi)
        out.append(
            BoundingBox3D(
                r * math.cos(th),
                r * math.sin(th),
                0.8,
                rng.uniform(-math.pi, math.pi),
                4.5 + 0.3 * rng.standard_normal(),
                2.0 + 0.1 * rng.standard_normal(),
                1.6,
                rng.uniform(0.01, cfg.fp_score_max),
            )
        )
    out = _nms(out, MERGE_IOU)
    return DetectionEvidence(
        -1 if cav_id is None else cav_id, truth.frame, cav, tuple(out), float(cfg.nominal_feature_bytes)
    )


def quantize_evidence(e: DetectionEvidence, ratio: float, cfg: SensorConfig | None = None, seed: int = 0) -> DetectionEvidence:
    """Compress shared evidence: payload shrinks by ``ratio``, centers pick up quantisation noise."""
    if ratio < 1:
        raise ValueError(f"compression ratio must be >= 1, got {ratio}")
    if ratio == 1:
        return e
    cfg = cfg or SensorConfig()
    sigma = cfg.compression_sigma(ratio)
    boxes = e.boxes
    if sigma > 0 and boxes:
        rng = derive_rng(seed, e.sender, e.frame, "quantize")
        noise = rng.standard_normal((len(boxes), 2)) * sigma
        boxes = tuple(
            replace(b, x=b.x + float(dx), y=b.y + float(dy)) for b, (dx, dy) in zip(boxes, noise)
        )
    return replace(e, boxes=boxes, nominal_feature_bytes=e.nominal_feature_bytes / ratio)


def align_evidence(e: DetectionEvidence, receiver: Pose2D) -> DetectionEvidence:
    """Re-express shared evidence in the receiver's frame using the sender's pose."""
    boxes = tuple(transform_box(b, e.pose, receiver) for b in e.boxes)
    return replace(e, boxes=boxes, pose=receiver)


# ----------------------------------------------------------------------------
# fusion
# ----------------------------------------------------------------------------

def _merge_members(members: list[BoundingBox3D]) -> BoundingBox3D:
    if len(members) == 1:
        return members[0]
    w = np.array([b.score for b in members])
    if w.sum() <= 0:
        w = np.ones(len(members))
    w = w / w.sum()
    ref = members[int(np.argmax([b.score for b in members]))].yaw
    dyaw = []
    for b in members:
        d = wrap_angle(b.yaw - ref)
        if abs(d) > math.pi / 2:  # box heading is ambiguous by pi
            d = wrap_angle(d + math.pi)
        dyaw.append(d)
    arr = np.array([[b.x, b.y, b.z, b.l, b.w, b.h] for b in members])
    x, y, z, l, wd, h = w @ arr
    score = 1.0 - float(np.prod([1.0 - b.score for b in members]))
    return BoundingBox3D(x, y, z, ref + float(w @ np.array(dyaw)), l, wd, h, min(1.0, score))


def fuse_detections(
    ego: DetectionEvidence,
    received: Sequence[DetectionEvidence] = (),
    merge_iou: float = MERGE_IOU,
) -> FusedDetections:
    """Union of all sources with overlapping boxes merged.

    Boxes are clustered greedily in descending score order (a box joins the
    cluster whose seed it overlaps most, at IoU >= ``merge_iou``). Clusters
    are score-weighted averages with score ``1 - prod(1 - s_i)``; clustering
    repeats on the merged boxes until no pair overlaps that much.
    """
    pool = list(ego.boxes)
    for r in received:
        pool.extend(r.boxes)
    if not received or len(pool) < 2:
        return FusedDetections(ego.sender, ego.frame, tuple(ego.boxes) if not received else tuple(pool))

    clusters: list[list[BoundingBox3D]] = [[b] for b in pool]
    while True:
        reps = [_merge_members(c) for c in clusters]
        ious = iou_matrix(reps, reps)
        np.fill_diagonal(ious, 0.0)
        if not (ious >= merge_iou).any():
            break
        order = sorted(range(len(reps)), key=lambda i: (-reps[i].score, i))
        seeds: list[int] = []
        owner: dict[int, int] = {}
        for i in order:
            best, best_iou = None, merge_iou
            for s in seeds:
                if ious[i, s] >= best_iou:
                    best, best_iou = s, ious[i, s]
            if best is None:
                seeds.append(i)
                owner[i] = i
            else:
                owner[i] = best
        grouped: dict[int, list[BoundingBox3D]] = {}
        for i in sorted(owner):
            grouped.setdefault(owner[i], []).extend(clusters[i])
        clusters = [grouped[s] for s in sorted(grouped)]
    return FusedDetections(ego.sender, ego.frame, tuple(reps))
