"""Constant-velocity 3D Kalman tracker with two-pass association and birth/death memory."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BoundingBox3D, iou_matrix, wrap_angle

STATE_DIM = 10  # x y z yaw l w h vx vy vz
OBS_DIM = 7
YAW = 3

H = np.hstack([np.eye(OBS_DIM), np.zeros((OBS_DIM, 3))])


def _obs_diag(pos: float, yaw: float, ext: float) -> np.ndarray:
    return np.array([pos, pos, pos, yaw, ext, ext, ext])


@dataclass
class TrackerConfig:
    f_min: int = 3            # consecutive hits to confirm
    age_min: int = 2          # consecutive misses to delete
    iou_min: float = 0.01
    dist_max: float = 10.0    # meters, second-pass gate
    q_pos: float = 0.1
    q_yaw: float = 0.01
    q_ext: float = 0.01
    q_vel: float = 1.0
    r_pos: float = 0.1
    r_yaw: float = 0.01
    r_ext: float = 0.01
    p0_scale: float = 10.0
    p0_vel: float = 100.0

    def __post_init__(self):
        if self.f_min < 1 or self.age_min < 1:
            raise ValueError("f_min and age_min must be >= 1")
        if not (self.iou_min > 0 and self.dist_max > 0):
            raise ValueError("association thresholds must be positive")

    @property
    def Q(self) -> np.ndarray:
        return np.diag(np.concatenate([_obs_diag(self.q_pos, self.q_yaw, self.q_ext), [self.q_vel] * 3]))

    @property
    def R(self) -> np.ndarray:
        return np.diag(_obs_diag(self.r_pos, self.r_yaw, self.r_ext))

    @property
    def P0(self) -> np.ndarray:
        return np.diag(np.concatenate([self.p0_scale * np.diag(self.R), [self.p0_vel] * 3]))

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "TrackerConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class KalmanState:
    mean: np.ndarray
    cov: np.ndarray

    def box(self, score: float = 1.0) -> BoundingBox3D:
        m = self.mean
        return BoundingBox3D(m[0], m[1], m[2], m[3], max(m[4], 1e-3), max(m[5], 1e-3), max(m[6], 1e-3), score)


@dataclass
class HistoryEntry:
    frame: int
    box: BoundingBox3D
    predicted: bool = False   # coasted frame, filled from the motion model


@dataclass
class Track:
    id: int
    state: KalmanState
    hits: int = 1
    misses: int = 0
    age: int = 0
    confirmed: bool = False
    score: float = 1.0
    scores: list[float] = field(default_factory=list)
    history: list[HistoryEntry] = field(default_factory=list)

    @property
    def box(self) -> BoundingBox3D:
        return self.state.box(self.score)

    @property
    def velocity(self) -> tuple[float, float]:
        return float(self.state.mean[7]), float(self.state.mean[8])

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores)) if self.scores else self.score


def transition(dt: float) -> np.ndarray:
    F = np.eye(STATE_DIM)
    F[0, 7] = F[1, 8] = F[2, 9] = dt
    return F


def init_track(track_id: int, z: BoundingBox3D, frame: int, cfg: TrackerConfig) -> Track:
    mean = np.zeros(STATE_DIM)
    mean[:OBS_DIM] = [z.x, z.y, z.z, z.yaw, z.l, z.w, z.h]
    t = Track(track_id, KalmanState(mean, cfg.P0.copy()), score=z.score, scores=[z.score])
    t.history.append(HistoryEntry(frame, z))
    return t


def kf_predict(t: Track, dt: float, cfg: TrackerConfig) -> Track:
    """Advance the state one step with the constant-velocity model; mutates and returns ``t``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    F = transition(dt)
    mean = F @ t.state.mean
    mean[YAW] = wrap_angle(mean[YAW])
    cov = F @ t.state.cov @ F.T + cfg.Q
    t.state = KalmanState(mean, 0.5 * (cov + cov.T))
    t.age += 1
    return t


def kf_update(t: Track, z: BoundingBox3D, cfg: TrackerConfig) -> Track:
    """Joseph-form measurement update; the yaw innovation is wrapped. Mutates and returns ``t``."""
    m, P = t.state.mean, t.state.cov
    obs = np.array([z.x, z.y, z.z, z.yaw, z.l, z.w, z.h])
    # a box heading is only defined up to pi: flip the measurement if that is closer
    d_yaw = wrap_angle(obs[YAW] - m[YAW])
    if abs(d_yaw) > math.pi / 2:
        d_yaw = wrap_angle(d_yaw + math.pi)
    innov = obs - H @ m
    innov[YAW] = d_yaw
    S = H @ P @ H.T + cfg.R
    K = np.linalg.solve(S, H @ P).T
    mean = m + K @ innov
    mean[YAW] = wrap_angle(mean[YAW])
    A = np.eye(STATE_DIM) - K @ H
    cov = A @ P @ A.T + K @ cfg.R @ K.T
    t.state = KalmanState(mean, 0.5 * (cov + cov.T))
    t.hits += 1
    t.misses = 0
    t.score = z.score
    t.scores.append(z.score)
    return t


@dataclass
class Association:
    matches: list[tuple[int, int]]
    unmatched_tracks: list[int]
    unmatched_detections: list[int]


def associate(predicted: Sequence[Track], detections: Sequence[BoundingBox3D], cfg: TrackerConfig) -> Association:
    """Hungarian on IoU, then a greedy center-distance pass for the leftovers.

    Pairs are indices into ``predicted`` and ``detections``.
    """
    nt, nd = len(predicted), len(detections)
    matches: list[tuple[int, int]] = []
    if nt and nd:
        ious = iou_matrix([t.box for t in predicted], list(detections))
        gain = np.where(ious >= cfg.iou_min, ious, 0.0)
        rows, cols = linear_sum_assignment(gain, maximize=True)
        matches = [(int(r), int(c)) for r, c in zip(rows, cols) if ious[r, c] >= cfg.iou_min]

    free_t = [i for i in range(nt) if i not in {m[0] for m in matches}]
    free_d = [j for j in range(nd) if j not in {m[1] for m in matches}]
    if free_t and free_d:
        tp = np.array([[predicted[i].state.mean[0], predicted[i].state.mean[1]] for i in free_t])
        dp = np.array([[detections[j].x, detections[j].y] for j in free_d])
        dist = np.hypot(tp[:, None, 0] - dp[None, :, 0], tp[:, None, 1] - dp[None, :, 1])
        pairs = sorted(
            ((dist[a, b], a, b) for a in range(len(free_t)) for b in range(len(free_d)) if dist[a, b] <= cfg.dist_max)
        )
        used_t, used_d = set(), set()
        for _, a, b in pairs:
            if a in used_t or b in used_d:
                continue
            used_t.add(a)
            used_d.add(b)
            matches.append((free_t[a], free_d[b]))
    matched_t = {m[0] for m in matches}
    matched_d = {m[1] for m in matches}
    return Association(
        sorted(matches),
        [i for i in range(nt) if i not in matched_t],
        [j for j in range(nd) if j not in matched_d],
    )


def lifecycle_step(
    tracks: list[Track],
    assoc: Association,
    detections: Sequence[BoundingBox3D],
    frame: int,
    cfg: TrackerConfig,
    ids: Any,
) -> list[Track]:
    """Apply updates, births and deaths for one frame.

    ``tracks`` must already be predicted to ``frame``; ``ids`` is an iterator
    of fresh track ids (never reused).
    """
    out: list[Track] = []
    for ti, dj in assoc.matches:
        t = kf_update(tracks[ti], detections[dj], cfg)
        if t.hits >= cfg.f_min:
            t.confirmed = True
        t.history.append(HistoryEntry(frame, t.box))
        out.append(t)
    for ti in assoc.unmatched_tracks:
        t = tracks[ti]
        t.hits = 0
        t.misses += 1
        if t.misses >= cfg.age_min:
            continue  # death
        t.history.append(HistoryEntry(frame, t.box, predicted=True))
        out.append(t)
    for dj in assoc.unmatched_detections:
        out.append(init_track(next(ids), detections[dj], frame, cfg))
    out.sort(key=lambda t: t.id)
    return out


class Tracker:
    """One tracker per CAV, operating in a fixed (world) frame."""

    def __init__(self, cfg: TrackerConfig | None = None, dt: float = 0.1, max_history: int = 50):
        self.cfg = cfg or TrackerConfig()
        self.dt = dt
        self.max_history = max_history
        self.tracks: list[Track] = []
        self._ids = itertools.count()
        self.frame: int | None = None

    def step(self, detections: Sequence[BoundingBox3D], frame: int) -> list[Track]:
        if self.frame is not None:
            steps = frame - self.frame
            if steps < 1:
                raise ValueError("frames must increase")
            for t in self.tracks:
                for _ in range(steps):
                    kf_predict(t, self.dt, self.cfg)
        self.frame = frame
        assoc = associate(self.tracks, detections, self.cfg)
        self.tracks = lifecycle_step(self.tracks, assoc, detections, frame, self.cfg, self._ids)
        for t in self.tracks:
            if len(t.history) > self.max_history:
                del t.history[: len(t.history) - self.max_history]
        return self.tracks

    def confirmed(self) -> list[Track]:
        return [t for t in self.tracks if t.confirmed]

    def reported(self) -> list[Track]:
        """Tracks emitted for evaluation: confirmed and updated this frame."""
        return [t for t in self.tracks if t.confirmed and t.misses == 0]


def track_histories(tracks: Sequence[Track], frame: int, T_h: int) -> dict[int, list[HistoryEntry]]:
    """Last ``min(T_h, available)`` history entries of each confirmed track, up to ``frame``."""
    if T_h < 1:
        raise ValueError("T_h must be >= 1")
    out = {}
    for t in tracks:
        if not t.confirmed:
            continue
        hist = [h for h in t.history if h.frame <= frame]
        out[t.id] = hist[-T_h:]
    return out
