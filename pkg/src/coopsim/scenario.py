"""Ground-truth worlds: lane routes, synthetic traffic, scenario files.

Synthetic agents drive closed lane loops built from straight segments and
circular fillets. Speed is constant on each segment (slower through the
turns), so every agent's pose is an exact closed-form function of time.
Agents sharing a loop share its speed profile and therefore never overtake
each other.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import BoundingBox3D, Pose2D, wrap_angle

DT = 0.1
HISTORY_FRAMES = 10
FUTURE_FRAMES = 50
LANE_CENTER = "lane-center"
ROAD_EDGE = "road-edge"
MAP_KINDS = (LANE_CENTER, ROAD_EDGE)
LARGE_VEHICLE_LENGTH = 8.0


class ScenarioParseError(ValueError):
    """Scenario document is malformed (bad JSON, missing or mistyped field)."""


class ScenarioValidationError(ValueError):
    """Scenario parsed but breaks a structural invariant."""


# ----------------------------------------------------------------------------
# domain types
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MapPolyline:
    points: np.ndarray
    kind: str = LANE_CENTER

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ScenarioValidationError("map polyline needs at least 2 (x, y) points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise ScenarioValidationError("map polyline has repeated consecutive points")
        if self.kind not in MAP_KINDS:
            raise ScenarioValidationError(f"unknown map polyline kind {self.kind!r}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True, eq=False)
class AgentRecord:
    """One agent's extents and its true state on a contiguous frame span.

    ``states[i]`` holds (x, y, z, yaw, vx, vy) for frame ``start_frame + i``.
    """

    id: int
    l: float
    w: float
    h: float
    start_frame: int
    states: np.ndarray

    def __post_init__(self):
        st = np.array(self.states, dtype=float)
        if st.ndim != 2 or st.shape[1] != 6 or len(st) == 0:
            raise ScenarioValidationError(f"agent {self.id}: states must be a non-empty (n, 6) array")
        st.setflags(write=False)
        object.__setattr__(self, "states", st)

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.states)

    @property
    def is_large(self) -> bool:
        return self.l >= LARGE_VEHICLE_LENGTH

    def exists_at(self, frame: int) -> bool:
        return self.start_frame <= frame < self.end_frame

    def state_at(self, frame: int) -> np.ndarray:
        return self.states[frame - self.start_frame]

    def box_at(self, frame: int) -> BoundingBox3D:
        x, y, z, yaw, _, _ = self.state_at(frame)
        return BoundingBox3D(x, y, z, yaw, self.l, self.w, self.h, 1.0)

    def pose_at(self, frame: int) -> Pose2D:
        x, y, _, yaw, _, _ = self.state_at(frame)
        return Pose2D(x, y, yaw)


@dataclass(frozen=True)
class FrameTruth:
    frame: int
    boxes: list[tuple[int, BoundingBox3D]]
    cav_poses: dict[int, Pose2D]


@dataclass(frozen=True, eq=False)
class Scenario:
    dt: float
    n_frames: int
    agents: tuple[AgentRecord, ...]
    cav_ids: tuple[int, ...]
    map: tuple[MapPolyline, ...]
    seed: int = 0
    _truth_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "cav_ids", tuple(int(c) for c in self.cav_ids))
        object.__setattr__(self, "map", tuple(self.map))
        validate_scenario(self)

    def agent(self, agent_id: int) -> AgentRecord:
        return self._by_id[agent_id]

    @property
    def _by_id(self) -> dict[int, AgentRecord]:
        cache = self._truth_cache.get("by_id")
        if cache is None:
            cache = {a.id: a for a in self.agents}
            self._truth_cache["by_id"] = cache
        return cache

    def to_dict(self) -> dict[str, Any]:
        return {
            "dt": self.dt,
            "n_frames": self.n_frames,
            "seed": self.seed,
            "cav_ids": list(self.cav_ids),
            "agents": [
                {
                    "id": a.id,
                    "l": a.l,
                    "w": a.w,
                    "h": a.h,
                    "frames": [
                        {
                            "frame": a.start_frame + i,
                            "x": float(row[0]),
                            "y": float(row[1]),
                            "z": float(row[2]),
                            "yaw": float(row[3]),
                            "vx": float(row[4]),
                            "vy": float(row[5]),
                        }
                        for i, row in enumerate(a.states)
                    ],
                }
                for a in self.agents
            ],
            "map": [{"kind": m.kind, "points": m.points.tolist()} for m in self.map],
        }

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


def validate_scenario(s: Scenario) -> None:
    if not s.dt > 0:
        raise ScenarioValidationError(f"dt must be positive, got {s.dt}")
    if s.n_frames < 1:
        raise ScenarioValidationError(f"n_frames must be >= 1, got {s.n_frames}")
    ids = [a.id for a in s.agents]
    if len(set(ids)) != len(ids):
        raise ScenarioValidationError("agent ids must be unique")
    missing = [c for c in s.cav_ids if c not in set(ids)]
    if missing:
        raise ScenarioValidationError(f"cav_ids {missing} are not agent ids")
    if len(set(s.cav_ids)) < 2:
        raise ScenarioValidationError("cav_ids must name at least 2 distinct CAVs")
    for a in s.agents:
        if not (a.l > 0 and a.w > 0 and a.h > 0):
            raise ScenarioValidationError(f"agent {a.id}: extents must be positive")
        if a.start_frame < 0 or a.end_frame > s.n_frames:
            raise ScenarioValidationError(
                f"agent {a.id}: frames [{a.start_frame}, {a.end_frame}) fall outside [0, {s.n_frames})"
            )
        if not np.all(np.isfinite(a.states)):
            raise ScenarioValidationError(f"agent {a.id}: non-finite state values")
    for c in s.cav_ids:
        a = next(ag for ag in s.agents if ag.id == c)
        if a.start_frame != 0 or a.end_frame != s.n_frames:
            raise ScenarioValidationError(f"CAV {c} must exist for every frame")


def truth_at(s: Scenario, frame: int) -> FrameTruth:
    """Ground-truth boxes (score 1) and CAV poses at one frame."""
    if not 0 <= frame < s.n_frames:
        raise IndexError(f"frame {frame} outside [0, {s.n_frames})")
    cached = s._truth_cache.get(frame)
    if cached is not None:
        return cached
    boxes = [(a.id, a.box_at(frame)) for a in s.agents if a.exists_at(frame)]
    poses = {c: s.agent(c).pose_at(frame) for c in s.cav_ids}
    truth = FrameTruth(frame, boxes, poses)
    s._truth_cache[frame] = truth
    return truth


def future_positions(s: Scenario, agent_id: int, frame: int, horizon: int) -> np.ndarray | None:
    """True (x, y) for frames frame+1 .. frame+horizon, or None if not all exist."""
    a = s.agent(agent_id)
    if not (a.exists_at(frame + 1) and a.exists_at(frame + horizon)):
        return None
    lo = frame + 1 - a.start_frame
    return np.array(a.states[lo:lo + horizon, :2])


# ----------------------------------------------------------------------------
# routes
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Route:
    """Closed loop of straight and circular segments with per-segment speed."""

    start_xy: np.ndarray
    start_yaw: np.ndarray
    length: np.ndarray
    curvature: np.ndarray
    speed: np.ndarray

    @property
    def s0(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.length)[:-1]])

    @property
    def t0(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.length / self.speed)[:-1]])

    @property
    def total_length(self) -> float:
        return float(self.length.sum())

    @property
    def period(self) -> float:
        return float((self.length / self.speed).sum())

    def time_of(self, s: float) -> float:
        s = s % self.total_length
        i = int(np.searchsorted(self.s0, s, side="right") - 1)
        return float(self.t0[i] + (s - self.s0[i]) / self.speed[i])

    def _eval(self, idx: np.ndarray, u: np.ndarray):
        p0 = self.start_xy[idx]
        yaw0 = self.start_yaw[idx]
        k = self.curvature[idx]
        yaw = yaw0 + k * u
        straight = k == 0.0
        safe_k = np.where(straight, 1.0, k)
        x = np.where(straight, p0[:, 0] + u * np.cos(yaw0), p0[:, 0] + (np.sin(yaw) - np.sin(yaw0)) / safe_k)
        y = np.where(straight, p0[:, 1] + u * np.sin(yaw0), p0[:, 1] + (np.cos(yaw0) - np.cos(yaw)) / safe_k)
        return x, y, yaw

    def states_at_times(self, tau0: float, times: np.ndarray) -> np.ndarray:
        """(x, y, yaw, vx, vy) after driving ``times`` seconds from route time ``tau0``."""
        tau = np.mod(tau0 + np.asarray(times, dtype=float), self.period)
        idx = np.clip(np.searchsorted(self.t0, tau, side="right") - 1, 0, len(self.length) - 1)
        u = np.minimum((tau - self.t0[idx]) * self.speed[idx], self.length[idx])
        x, y, yaw = self._eval(idx, u)
        v = self.speed[idx]
        return np.stack([x, y, wrap_angle(yaw), v * np.cos(yaw), v * np.sin(yaw)], axis=1)

    def polyline(self, spacing: float = 2.0) -> np.ndarray:
        pts = []
        for i, seg_len in enumerate(self.length):
            n = max(1, int(math.ceil(seg_len / spacing)))
            u = np.linspace(0.0, seg_len, n, endpoint=False)
            x, y, _ = self._eval(np.full(n, i), u)
            pts.append(np.stack([x, y], axis=1))
        pts.append(self.start_xy[:1])
        return np.concatenate(pts)


def filleted_loop(
    corners: Sequence[tuple[float, float]],
    radius: float,
    base_speed: float,
    turn_factor: float,
    speed_jitter: float,
    rng: np.random.Generator,
) -> Route:
    """Closed loop through polygon ``corners`` with circular fillets at each corner.

    The first segment is the straight leaving corner 0 towards corner 1.
    """
    c = np.asarray(corners, dtype=float)
    n = len(c)
    d_in = c - np.roll(c, 1, axis=0)
    d_in /= np.linalg.norm(d_in, axis=1, keepdims=True)
    d_out = np.roll(d_in, -1, axis=0)
    turn = np.arctan2(d_in[:, 0] * d_out[:, 1] - d_in[:, 1] * d_out[:, 0], (d_in * d_out).sum(1))
    tangent = radius * np.tan(np.abs(turn) / 2.0)
    t_in = c - tangent[:, None] * d_in
    t_out = c + tangent[:, None] * d_out

    start_xy, start_yaw, length, curvature, speed = [], [], [], [], []
    for i in range(n):
        j = (i + 1) % n
        straight_len = float(np.linalg.norm(t_in[j] - t_out[i]))
        if straight_len > 1e-9:
            start_xy.append(t_out[i])
            start_yaw.append(math.atan2(d_out[i, 1], d_out[i, 0]))
            length.append(straight_len)
            curvature.append(0.0)
            speed.append(base_speed * (1.0 + rng.uniform(-speed_jitter, speed_jitter)))
        start_xy.append(t_in[j])
        start_yaw.append(math.atan2(d_in[j, 1], d_in[j, 0]))
        length.append(radius * abs(turn[j]))
        curvature.append(math.copysign(1.0 / radius, turn[j]))
        speed.append(base_speed * turn_factor)
    return Route(
        np.array(start_xy), np.array(start_yaw), np.array(length), np.array(curvature), np.array(speed)
    )


# ----------------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Parameters of the synthetic traffic generator.

    ``n_agents`` counts non-CAV agents (moving traffic plus parked trucks);
    the ``n_cavs`` connected vehicles are added on top.
    """

    map: str = "intersection"
    extent: float = 100.0
    n_agents: int = 20
    n_cavs: int = 3
    n_frames: int = 200
    dt: float = DT
    speed_range: tuple[float, float] = (6.0, 11.0)
    segment_speed_jitter: float = 0.15
    turn_speed_factor: float = 0.6
    occlusion_density: float = 0.5
    truck_fraction: float = 0.15
    car_extent: tuple[float, float, float] = (4.5, 2.0, 1.6)
    truck_extent: tuple[float, float, float] = (10.0, 2.8, 3.4)
    lane_width: float = 3.5
    min_gap: float = 25.0
    cav_platoon: bool = False
    aligned_start: bool = False

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "GeneratorConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario generator keys: {sorted(unknown)}")
        for key in ("speed_range", "car_extent", "truck_extent"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key in ("speed_range", "car_extent", "truck_extent"):
            out[key] = list(out[key])
        return out

    def validate(self) -> None:
        if self.map not in ("intersection", "straight"):
            raise ValueError(f"unknown map type {self.map!r}")
        if not 0 < self.extent <= 100.0:
            raise ValueError(f"map extent must be in (0, 100] m, got {self.extent}")
        if not 2 <= self.n_cavs <= 7:
            raise ValueError(f"CAV count must be in [2, 7], got {self.n_cavs}")
        if self.n_frames < HISTORY_FRAMES + FUTURE_FRAMES:
            raise ValueError(
                f"duration of {self.n_frames} frames is shorter than history + future "
                f"({HISTORY_FRAMES + FUTURE_FRAMES})"
            )
        if self.n_agents < 0:
            raise ValueError("n_agents must be >= 0")
        if not 0.0 <= self.occlusion_density <= 1.0:
            raise ValueError("occlusion_density must be in [0, 1]")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid speed range {self.speed_range}")


def _intersection_layout(cfg: GeneratorConfig):
    half = cfg.extent / 2.0
    ring = 0.8 * half
    a = cfg.lane_width / 2.0
    loops = []
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        xs = sorted((sx * a, sx * (ring - a)))
        ys = sorted((sy * a, sy * (ring - a)))
        corners = [(xs[0], ys[0]), (xs[1], ys[0]), (xs[1], ys[1]), (xs[0], ys[1])]
        loops.append((corners, 6.0))
    r = ring + a
    loops.append(([(r, r), (r, -r), (-r, -r), (-r, r)], 10.0))  # clockwise outer ring
    edge = ring + 2 * a
    edges = [
        np.array([(-edge, -edge), (edge, -edge), (edge, edge), (-edge, edge), (-edge, -edge)]),
    ]
    # shoulder slots next to the central cross, clear of the block-loop fillets
    off = a + 3.4
    slots = []
    for arm in ("E", "W", "N", "S"):
        for side in (1, -1):
            slots.append((arm, side * off))
    return loops, edges, slots, ring


def _straight_layout(cfg: GeneratorConfig):
    half = 0.48 * cfg.extent
    loops = [([(-half, -10.0), (half, -10.0), (half, 10.0), (-half, 10.0)], 10.0)]
    edge = 10.0 + cfg.lane_width
    edges = [np.array([(-half, -edge), (half, -edge)]), np.array([(-half, edge), (half, edge)])]
    return loops, edges, [], half


def generate_synthetic(config: GeneratorConfig | dict | None = None, seed: int = 0) -> Scenario:
    """Deterministic synthetic scenario for ``(config, seed)``."""
    cfg = config if isinstance(config, GeneratorConfig) else GeneratorConfig.from_dict(config)
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x5CE7]))

    if cfg.map == "intersection":
        loops, edges, slots, ring = _intersection_layout(cfg)
    else:
        loops, edges, slots, ring = _straight_layout(cfg)

    routes = []
    for corners, radius in loops:
        base = rng.uniform(*cfg.speed_range)
        routes.append(filleted_loop(corners, radius, base, cfg.turn_speed_factor, cfg.segment_speed_jitter, rng))

    n_parked = min(len(slots), int(round(cfg.occlusion_density * len(slots)))) if slots else 0
    n_parked = min(n_parked, cfg.n_agents)
    n_moving = cfg.n_agents - n_parked + cfg.n_cavs
    capacity = np.array([max(1, int(r.total_length // cfg.min_gap)) for r in routes])
    if n_moving > capacity.sum():
        raise ValueError(f"{n_moving} moving vehicles exceed lane capacity {int(capacity.sum())}")

    # route assignment; CAVs are the last n_cavs moving vehicles
    load = np.zeros(len(routes), dtype=int)
    assignment = []
    for v in range(n_moving):
        is_cav = v >= n_moving - cfg.n_cavs
        free = capacity - load
        if cfg.cav_platoon and is_cav and v > n_moving - cfg.n_cavs and free[assignment[-1]] > 0:
            choice = assignment[-1]
        else:
            choice = int(rng.choice(len(routes), p=free / free.sum()))
        assignment.append(choice)
        load[choice] += 1

    times = np.arange(cfg.n_frames) * cfg.dt
    records: list[AgentRecord] = []
    next_id = 0
    moving_ids = []
    for ri, route in enumerate(routes):
        members = [v for v in range(n_moving) if assignment[v] == ri]
        if not members:
            continue
        spacing = route.total_length / len(members)
        offset = 0.0 if cfg.aligned_start else rng.uniform(0.0, route.total_length)
        slack = max(0.0, spacing - cfg.min_gap) / 2.0
        for slot, v in enumerate(members):
            jitter = 0.0 if cfg.aligned_start else rng.uniform(-slack, slack)
            s = offset + slot * spacing + jitter
            moving_ids.append((v, ri, s))

    moving_ids.sort()
    for v, ri, s in moving_ids:
        is_cav = v >= n_moving - cfg.n_cavs
        truck = (not is_cav) and rng.uniform() < cfg.truck_fraction
        l, w, h = cfg.truck_extent if truck else cfg.car_extent
        st = routes[ri].states_at_times(routes[ri].time_of(s), times)
        states = np.column_stack([st[:, 0], st[:, 1], np.full(len(st), h / 2.0), st[:, 2], st[:, 3], st[:, 4]])
        records.append(AgentRecord(next_id, l, w, h, 0, states))
        next_id += 1
    cav_ids = tuple(r.id for r in records[-cfg.n_cavs:])

    if n_parked:
        chosen = rng.choice(len(slots), size=n_parked, replace=False)
        l, w, h = cfg.truck_extent
        for k in sorted(int(c) for c in chosen):
            arm, lateral = slots[k]
            along = rng.uniform(0.3 * ring, 0.75 * ring)
            if arm in ("E", "W"):
                x, y, yaw = (along if arm == "E" else -along), lateral, 0.0
            else:
                x, y, yaw = lateral, (along if arm == "N" else -along), math.pi / 2
            states = np.tile([x, y, h / 2.0, yaw, 0.0, 0.0], (cfg.n_frames, 1))
            records.append(AgentRecord(next_id, l, w, h, 0, states))
            next_id += 1

    lane_map = [MapPolyline(r.polyline(), LANE_CENTER) for r in routes]
    lane_map += [MapPolyline(e, ROAD_EDGE) for e in edges]
    return Scenario(cfg.dt, cfg.n_frames, tuple(records), cav_ids, tuple(lane_map), int(seed))


# ----------------------------------------------------------------------------
# scenario files
# ----------------------------------------------------------------------------

def _require(obj: dict, key: str, where: str, kinds):
    if not isinstance(obj, dict):
        raise ScenarioParseError(f"{where}: expected an object")
    if key not in obj:
        raise ScenarioParseError(f"{where}: missing required field '{key}'")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ScenarioParseError(f"{where}.{key}: expected {_kind_name(kinds)}, got {type(value).__name__}")
    return value


def _kind_name(kinds) -> str:
    kinds = kinds if isinstance(kinds, tuple) else (kinds,)
    return " or ".join(k.__name__ for k in kinds)


NUM = (int, float)


def scenario_from_dict(doc: Any) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario: top level must be an object")
    dt = float(_require(doc, "dt", "scenario", NUM))
    n_frames = _require(doc, "n_frames", "scenario", int)
    seed = doc.get("seed", 0)
    cav_ids = _require(doc, "cav_ids", "scenario", list)
    for i, c in enumerate(cav_ids):
        if isinstance(c, bool) or not isinstance(c, int):
            raise ScenarioParseError(f"scenario.cav_ids[{i}]: expected int")
    agents = []
    for i, ad in enumerate(_require(doc, "agents", "scenario", list)):
        where = f"scenario.agents[{i}]"
        aid = _require(ad, "id", where, int)
        l = float(_require(ad, "l", where, NUM))
        w = float(_require(ad, "w", where, NUM))
        h = float(_require(ad, "h", where, NUM))
        frames = _require(ad, "frames", where, list)
        if not frames:
            raise ScenarioParseError(f"{where}.frames: must not be empty")
        rows, idx = [], []
        for j, fd in enumerate(frames):
            fw = f"{where}.frames[{j}]"
            idx.append(_require(fd, "frame", fw, int))
            rows.append([float(_require(fd, k, fw, NUM)) for k in ("x", "y", "z", "yaw", "vx", "vy")])
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ScenarioValidationError(f"{where}.frames: frame indices must be contiguous and increasing")
        agents.append(AgentRecord(aid, l, w, h, idx[0], np.array(rows)))
    polylines = []
    for i, md in enumerate(_require(doc, "map", "scenario", list)):
        where = f"scenario.map[{i}]"
        kind = _require(md, "kind", where, str)
        pts = _require(md, "points", where, list)
        try:
            arr = np.array(pts, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ScenarioParseError(f"{where}.points: expected a list of [x, y] pairs") from exc
        polylines.append(MapPolyline(arr, kind))
    return Scenario(dt, n_frames, tuple(agents), tuple(cav_ids), tuple(polylines), int(seed))


def save_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(s.to_dict(), indent=1, sort_keys=True) + "\n")


def load_scenario(path: str | Path) -> Scenario:
    """Parse and validate a scenario file.

    Raises ScenarioParseError (with line/column or field path) for schema
    problems and ScenarioValidationError for invariant violations.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc)
