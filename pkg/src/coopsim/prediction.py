"""Multi-modal trajectory prediction.

Intention points come from k-means on ground-truth endpoints expressed in the
agent frame. For each intention the predictor rolls out a constant-turn arc
from the tracked state toward that point and wraps the modes as a Gaussian
mixture with growing spread. Mode weights favour intentions aligned with the
current heading and rollouts that stay near lane centers.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin

from .core import MU_X, MU_Y, P, RHO, SIGMA_X, SIGMA_Y, BoundingBox3D, GmmTrajectory, bivariate_normal_logpdf, covariance_to_params
from .scenario import DT, FUTURE_FRAMES, LANE_CENTER, MapPolyline, Scenario, future_positions

REFERENCE_SPEED = 10.0  # m/s; intention points are stored at this speed


@dataclass
class PredictorConfig:
    K: int = 6
    T_f: int = FUTURE_FRAMES
    dt: float = DT
    sigma0: float = 0.5
    sigma_growth: float = 0.05     # meters per step
    temperature: float = 1.0
    heading_weight: float = 2.0    # weight on cos(bearing to intention)
    lane_weight: float = 0.5       # penalty per meter of mean distance to the nearest lane
    reference_speed: float = REFERENCE_SPEED
    min_speed: float = 0.5         # below this the box yaw is trusted over the velocity
    fit_window: int = 10           # history boxes used to estimate velocity
    anisotropic: bool = False
    lateral_ratio: float = 0.5     # lateral / longitudinal sigma when anisotropic

    def __post_init__(self):
        if self.K < 1 or self.T_f < 1:
            raise ValueError("K and T_f must be >= 1")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.sigma_growth < 0:
            raise ValueError("sigma_growth must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "PredictorConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class IntentionSet:
    points: np.ndarray  # (K, 2), agent frame: x forward, y left

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 2)
        if len(pts) < 1:
            raise ValueError("an intention set needs at least one point")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("intention points must be distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def K(self) -> int:
        return len(self.points)


def save_intentions(intentions: IntentionSet, path: str | Path) -> None:
    np.savetxt(path, intentions.points, fmt="%.9f", header="x y")


def load_intentions(path: str | Path) -> IntentionSet:
    return IntentionSet(np.loadtxt(path, ndmin=2))


# ----------------------------------------------------------------------------
# k-means
# ----------------------------------------------------------------------------

def _farthest_point_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(len(X)))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[idx].copy()


class IntentionKMeans(ClusterMixin, BaseEstimator):
    """Lloyd's k-means with seeded farthest-point initialisation.

    Args:
        n_clusters: number of intention points.
        seed: RNG seed for the first center.
        max_iter: Lloyd iteration cap.
        tol: stop when no center moves farther than this.
    """

    def __init__(self, n_clusters: int = 6, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        if len(X) < self.n_clusters:
            raise ValueError(f"need at least {self.n_clusters} endpoints, got {len(X)}")
        centers = _farthest_point_init(X, self.n_clusters, np.random.default_rng(self.seed))
        for it in range(self.max_iter):
            labels = self._assign(X, centers)
            new = centers.copy()
            for k in range(self.n_clusters):
                members = X[labels == k]
                if len(members):
                    new[k] = members.mean(axis=0)
            shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
            centers = new
            if shift <= self.tol:
                break
        self.cluster_centers_ = centers
        self.labels_ = self._assign(X, centers)
        self.inertia_ = float(np.sum((X - centers[self.labels_]) ** 2))
        self.n_iter_ = it + 1
        return self

    @staticmethod
    def _assign(X, centers):
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        return np.argmin(d2, axis=1)

    def predict(self, X):
        return self._assign(np.asarray(X, dtype=float).reshape(-1, 2), self.cluster_centers_)


def fit_intentions(endpoints, K: int, seed: int = 0) -> IntentionSet:
    km = IntentionKMeans(n_clusters=K, seed=seed).fit(endpoints)
    return IntentionSet(km.cluster_centers_)


def training_endpoints(
    scenario: Scenario,
    T_f: int = FUTURE_FRAMES,
    stride: int = 5,
    min_speed: float = 1.0,
    reference_speed: float = REFERENCE_SPEED,
) -> np.ndarray:
    """Ground-truth displacement after ``T_f`` frames, in each agent's heading frame.

    Displacements are rescaled to ``reference_speed`` so modes transfer across speeds.
    """
    out = []
    for a in scenario.agents:
        for f in range(a.start_frame, a.end_frame - T_f + 1, stride):
            x, y, _, yaw, vx, vy = a.state_at(f)
            speed = math.hypot(vx, vy)
            if speed < min_speed:
                continue
            fut = future_positions(scenario, a.id, f, T_f)
            if fut is None:
                continue
            heading = math.atan2(vy, vx)
            dx, dy = fut[-1, 0] - x, fut[-1, 1] - y
            c, s = math.cos(heading), math.sin(heading)
            scale = reference_speed / speed
            out.append((scale * (c * dx + s * dy), scale * (-s * dx + c * dy)))
    return np.array(out, dtype=float).reshape(-1, 2)


# ----------------------------------------------------------------------------
# rollout
# ----------------------------------------------------------------------------

def estimate_motion(history: Sequence[BoundingBox3D], dt: float, window: int = 10, min_speed: float = 0.5):
    """Current position, heading and speed from a least-squares line fit of recent centers."""
    hist = list(history)[-window:]
    pos = np.array([[b.x, b.y] for b in hist], dtype=float)
    cur = pos[-1]
    if len(pos) >= 2:
        t = np.arange(len(pos), dtype=float) * dt
        tc = t - t.mean()
        vel = (tc @ (pos - pos.mean(axis=0))) / float(tc @ tc)
        cur = pos.mean(axis=0) + vel * tc[-1]
    else:
        vel = np.zeros(2)
    speed = float(np.hypot(*vel))
    heading = math.atan2(vel[1], vel[0]) if speed >= min_speed else hist[-1].yaw
    return cur, heading, speed


def _arc_offsets(displacement: np.ndarray, n_steps: int) -> np.ndarray:
    """Local (forward, left) positions along a constant-turn arc whose chord is ``displacement``.

    Returns (n_modes, n_steps, 2); progress along the arc is uniform in time.
    """
    d = np.linalg.norm(displacement, axis=1)
    bearing = np.arctan2(displacement[:, 1], displacement[:, 0])
    turn = np.clip(2.0 * bearing, -math.pi, math.pi)
    # chord = L * sinc(turn / 2)  ->  arc length L
    half_sinc = np.sinc(turn / (2.0 * math.pi))
    L = d / half_sinc
    frac = np.arange(1, n_steps + 1, dtype=float) / n_steps
    u = L[:, None] * frac[None, :]
    a = turn[:, None] * frac[None, :]
    fwd = u * np.sinc(a / math.pi)
    left = u * (a / 2.0) * np.sinc(a / (2.0 * math.pi)) ** 2
    out = np.stack([fwd, left], axis=-1)
    # when the turn was clamped the arc ends off the chord; rotate it onto the chord
    clamped = np.abs(2.0 * bearing) > math.pi
    if clamped.any():
        end = out[clamped, -1, :]
        rot = bearing[clamped] - np.arctan2(end[:, 1], end[:, 0])
        c, s = np.cos(rot)[:, None], np.sin(rot)[:, None]
        x, y = out[clamped, :, 0].copy(), out[clamped, :, 1].copy()
        out[clamped, :, 0] = c * x - s * y
        out[clamped, :, 1] = s * x + c * y
    return out


def lane_segments(map_lines: Sequence[MapPolyline]) -> np.ndarray:
    segs = [
        np.hstack([np.asarray(m.points[:-1], float), np.asarray(m.points[1:], float)])
        for m in map_lines
        if m.kind == LANE_CENTER
    ]
    return np.vstack(segs) if segs else np.zeros((0, 4))


class LaneIndex:
    """Nearest-lane distance lookup over lane centers densified to ``spacing`` meters.

    The densified point cloud overestimates the true point-to-polyline
    distance by at most ``spacing**2 / (8 d)``, negligible at 0.25 m.
    """

    def __init__(self, map_lines: Sequence[MapPolyline], spacing: float = 0.25):
        pts = []
        for seg in lane_segments(map_lines):
            n = max(1, int(math.ceil(math.hypot(seg[2] - seg[0], seg[3] - seg[1]) / spacing)))
            f = np.linspace(0.0, 1.0, n + 1)[:, None]
            pts.append(seg[None, :2] * (1 - f) + seg[None, 2:] * f)
        self.points = np.vstack(pts) if pts else np.zeros((0, 2))
        self.tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def distance(self, xy) -> np.ndarray:
        d, _ = self.tree.query(np.asarray(xy, float).reshape(-1, 2))
        return d


def distance_to_segments(points: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the nearest segment (rows x0 y0 x1 y1)."""
    p = np.asarray(points, float).reshape(-1, 2)
    a, b = segs[:, :2], segs[:, 2:]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-12)
    t = np.clip(np.einsum("pk,sk->ps", p, ab) - np.sum(a * ab, axis=1)[None, :], 0.0, None) / denom
    t = np.minimum(t, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.min(np.linalg.norm(p[:, None, :] - proj, axis=2), axis=1)


class KinematicGmmPredictor(BaseEstimator):
    """Intention-conditioned kinematic predictor with a scikit-learn style interface.

    ``fit`` learns the intention points from agent-frame endpoints;
    ``predict`` maps one track history to a ``GmmTrajectory``.
    """

    def __init__(
        self,
        K: int = 6,
        T_f: int = FUTURE_FRAMES,
        dt: float = DT,
        sigma0: float = 0.5,
        sigma_growth: float = 0.05,
        temperature: float = 1.0,
        heading_weight: float = 2.0,
        lane_weight: float = 0.5,
        reference_speed: float = REFERENCE_SPEED,
        min_speed: float = 0.5,
        fit_window: int = 10,
        anisotropic: bool = False,
        lateral_ratio: float = 0.5,
        seed: int = 0,
    ):
        self.K = K
        self.T_f = T_f
        self.dt = dt
        self.sigma0 = sigma0
        self.sigma_growth = sigma_growth
        self.temperature = temperature
        self.heading_weight = heading_weight
        self.lane_weight = lane_weight
        self.reference_speed = reference_speed
        self.min_speed = min_speed
        self.fit_window = fit_window
        self.anisotropic = anisotropic
        self.lateral_ratio = lateral_ratio
        self.seed = seed

    @classmethod
    def from_config(cls, cfg: PredictorConfig, seed: int = 0) -> "KinematicGmmPredictor":
        return cls(**cfg.to_dict(), seed=seed)

    @property
    def config(self) -> PredictorConfig:
        return PredictorConfig(**{k: v for k, v in self.get_params().items() if k != "seed"})

    def fit(self, endpoints, y=None):
        self.intentions_ = fit_intentions(endpoints, self.K, self.seed)
        return self

    def set_intentions(self, intentions: IntentionSet) -> "KinematicGmmPredictor":
        if intentions.K != self.K:
            raise ValueError(f"intention set has K={intentions.K}, predictor expects {self.K}")
        self.intentions_ = intentions
        return self

    def predict(self, history, map_lines=(), t_generated: int = 0, agent_id: int = -1) -> GmmTrajectory:
        if not hasattr(self, "intentions_"):
            raise RuntimeError("predictor has no intention points; call fit() first")
        return predict_agent(history, map_lines, self.intentions_, self.config, t_generated, agent_id)


def mode_weights(bearing: np.ndarray, lane_dist: np.ndarray, cfg: PredictorConfig) -> np.ndarray:
    score = (cfg.heading_weight * np.cos(bearing) - cfg.lane_weight * lane_dist) / cfg.temperature
    score = score - score.max()
    w = np.exp(score)
    return w / w.sum()


def predict_agent(
    history: Sequence[BoundingBox3D],
    map_lines: "Sequence[MapPolyline] | LaneIndex",
    intentions: IntentionSet,
    cfg: PredictorConfig,
    t_generated: int = 0,
    agent_id: int = -1,
) -> GmmTrajectory:
    """Roll out one arc per intention point and wrap the result as a mixture.

    ``map_lines`` may also be a prebuilt ``LaneIndex``, which saves
    rebuilding it for every agent.
    """
    if len(history) == 0:
        raise ValueError("history must be non-empty")
    cur, heading, speed = estimate_motion(history, cfg.dt, cfg.fit_window, cfg.min_speed)
    disp = intentions.points * (speed / cfg.reference_speed)
    bearing = np.arctan2(intentions.points[:, 1], intentions.points[:, 0])
    local = _arc_offsets(disp, cfg.T_f)  # (K, T, 2)
    c, s = math.cos(heading), math.sin(heading)
    means = np.empty_like(local)
    means[..., 0] = cur[0] + c * local[..., 0] - s * local[..., 1]
    means[..., 1] = cur[1] + s * local[..., 0] + c * local[..., 1]

    lanes = map_lines if isinstance(map_lines, LaneIndex) else LaneIndex(map_lines)
    if len(lanes) and cfg.lane_weight > 0:
        probe = means[:, 4::5, :]  # every half second
        lane_dist = lanes.distance(probe.reshape(-1, 2)).reshape(probe.shape[:2]).mean(axis=1)
    else:
        lane_dist = np.zeros(intentions.K)
    weights = mode_weights(bearing, lane_dist, cfg)

    K, T = intentions.K, cfg.T_f
    params = np.zeros((T, K, 6))
    params[..., P] = weights[None, :]
    params[..., MU_X] = means[..., 0].T
    params[..., MU_Y] = means[..., 1].T
    sig = cfg.sigma0 + cfg.sigma_growth * np.arange(1, T + 1, dtype=float)
    if cfg.anisotropic:
        # spread along each mode's direction of travel, narrower across it
        step = np.diff(np.concatenate([np.broadcast_to(cur, (K, 1, 2)), means], axis=1), axis=1)
        ang = np.arctan2(step[..., 1], step[..., 0]).T  # (T, K)
        ang = np.where(np.hypot(step[..., 0], step[..., 1]).T > 1e-9, ang, heading)
        lon = sig[:, None] ** 2
        lat = (cfg.lateral_ratio * sig[:, None]) ** 2
        ca, sa = np.cos(ang), np.sin(ang)
        cov = np.empty((T, K, 2, 2))
        cov[..., 0, 0] = lon * ca**2 + lat * sa**2
        cov[..., 1, 1] = lon * sa**2 + lat * ca**2
        cov[..., 0, 1] = cov[..., 1, 0] = (lon - lat) * ca * sa
        sx, sy, rho = covariance_to_params(cov)
        params[..., SIGMA_X], params[..., SIGMA_Y], params[..., RHO] = sx, sy, rho
    else:
        params[..., SIGMA_X] = sig[:, None]
        params[..., SIGMA_Y] = sig[:, None]
    return GmmTrajectory(params, t_generated, agent_id)


def modes_of(g: GmmTrajectory) -> np.ndarray:
    """(K, T, 2) mean trajectories, one per component."""
    return np.transpose(np.asarray(g.means), (1, 0, 2)).copy()


@dataclass(frozen=True)
class PredictionScore:
    nll: float
    cls: float
    total: float
    selected: int


def prediction_score(g: GmmTrajectory, gt, w_loc: float = 1.0, w_cls: float = 1.0) -> PredictionScore:
    """Hard-assignment likelihood score against a ground-truth future.

    The component whose final mean is closest to the true endpoint is
    selected; ``nll`` averages its negative log density over the horizon and
    ``cls`` is the negative log of its weight at the final step.
    """
    gt = np.asarray(gt, dtype=float)
    if gt.shape != (g.T, 2):
        raise ValueError(f"ground truth must have shape ({g.T}, 2), got {gt.shape}")
    end = g.params[-1]
    k = int(np.argmin(np.hypot(end[:, MU_X] - gt[-1, 0], end[:, MU_Y] - gt[-1, 1])))
    comp = g.params[:, k]
    logp = bivariate_normal_logpdf(
        gt[:, 0] - comp[:, MU_X], gt[:, 1] - comp[:, MU_Y], comp[:, SIGMA_X], comp[:, SIGMA_Y], comp[:, RHO]
    )
    nll = float(-np.mean(logp))
    p = float(comp[-1, P])
    cls = math.inf if p <= 0 else -math.log(p)
    return PredictionScore(nll, cls, w_loc * nll + w_cls * cls, k)
