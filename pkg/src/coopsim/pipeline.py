"""Frame-synchronous orchestration of sensing, sharing, fusion, tracking and prediction.

Every CAV acts as the ego at once. Within a frame the order is fixed:
all CAVs sense, feature evidence is sent, the channel delivers, each CAV
fuses and tracks, each CAV predicts (and in cooperative prediction mode
aggregates with the bundles its peers sent at the previous frame), and only
then are this frame's prediction bundles sent.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.optimize import linear_sum_assignment

from .aggregation import AggregationConfig, PredictionBundle, ReliabilityFeatures, aggregate, align_delayed, match_agents
from .core import MU_X, MU_Y, P, WORLD, BoundingBox3D, Pose2D, iou_3d, iou_matrix, transform_box, transform_gmm, transform_points
from .metrics import HORIZONS, TRACK_IOU, hull_area, prediction_ade_fde
from .prediction import IntentionSet, LaneIndex, PredictorConfig, fit_intentions, predict_agent, training_endpoints
from .scenario import FUTURE_FRAMES, HISTORY_FRAMES, GeneratorConfig, Scenario, future_positions, generate_synthetic, truth_at
from .sensing import DetectionEvidence, SensorConfig, align_evidence, fuse_detections, quantize_evidence, sense_local
from .tracking import Tracker, TrackerConfig, track_histories
from .v2x import FEATURE, PREDICTION, Channel, ChannelConfig, Message

ROUND = 6
SELF_IOU = 0.1  # fused boxes overlapping the ego's own footprint this much are discarded


class CooperationMode(str, enum.Enum):
    NO_COOPERATION = "NoCooperation"
    PERCEPTION_ONLY = "CooperativePerceptionOnly"
    PREDICTION = "CooperativePrediction"

    @property
    def shares_features(self) -> bool:
        return self is not CooperationMode.NO_COOPERATION

    @property
    def shares_predictions(self) -> bool:
        return self is CooperationMode.PREDICTION


@dataclass
class RunConfig:
    mode: CooperationMode = CooperationMode.PREDICTION
    delay: bool = True
    compression: float = 256.0
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    seed: int = 0                 # sensing / quantisation / jitter streams
    eval_range: float = 50.0      # half-width of the square evaluation window around each ego
    intention_seed: int = 1000    # seed of the training scenarios used for k-means
    intention_scenarios: int = 3
    predict: bool = True          # False skips forecasting (perception-only studies)

    def __post_init__(self):
        self.mode = CooperationMode(self.mode)
        if self.compression < 1:
            raise ValueError("compression ratio must be >= 1")

    @property
    def effective_channel(self) -> ChannelConfig:
        if not self.delay:
            return ChannelConfig.ideal(self.channel.deadline)
        return ChannelConfig(**{**self.channel.to_dict(), "seed": self.seed})

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        subs = {
            "channel": ChannelConfig,
            "sensor": SensorConfig,
            "tracker": TrackerConfig,
            "predictor": PredictorConfig,
            "aggregation": AggregationConfig,
        }
        for key, typ in subs.items():
            if key in d and not isinstance(d[key], typ):
                d[key] = typ.from_dict(d[key])
        if "compression" in d:
            d["compression"] = float(d["compression"])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode.value,
            "delay": self.delay,
            "compression": self.compression,
            "channel": self.channel.to_dict(),
            "sensor": self.sensor.to_dict(),
            "tracker": self.tracker.to_dict(),
            "predictor": self.predictor.to_dict(),
            "aggregation": self.aggregation.to_dict(),
            "seed": self.seed,
            "eval_range": self.eval_range,
            "intention_seed": self.intention_seed,
            "intention_scenarios": self.intention_scenarios,
            "predict": self.predict,
        }


@functools.lru_cache(maxsize=16)
def default_intentions(K: int, T_f: int, seed: int, n_scenarios: int, reference_speed: float) -> IntentionSet:
    """k-means intentions fitted on held-out synthetic scenarios (never the evaluated one)."""
    cfg = GeneratorConfig(n_frames=300)
    ends = [
        training_endpoints(generate_synthetic(cfg, seed + i), T_f=T_f, reference_speed=reference_speed)
        for i in range(n_scenarios)
    ]
    return fit_intentions(np.vstack(ends), K, seed)


# ----------------------------------------------------------------------------
# log helpers
# ----------------------------------------------------------------------------

def _r(x) -> float:
    v = round(float(x), ROUND)
    return 0.0 if v == 0 else v


def box_row(b: BoundingBox3D) -> list[float]:
    return [_r(v) for v in (b.x, b.y, b.z, b.yaw, b.l, b.w, b.h, b.score)]


def row_box(row) -> BoundingBox3D:
    return BoundingBox3D(*row)


def _in_window(b: BoundingBox3D, half: float) -> bool:
    return abs(b.x) <= half and abs(b.y) <= half


@dataclass
class CavState:
    cav_id: int
    tracker: Tracker


class Simulation:
    """Runs one scenario under one configuration, collecting a JSON-ready log."""

    def __init__(self, scenario: Scenario, cfg: RunConfig, intentions: IntentionSet | None = None):
        self.scenario = scenario
        self.cfg = cfg
        self.channel = Channel(cfg.effective_channel, scenario.dt)
        self.states = {
            c: CavState(c, Tracker(cfg.tracker, scenario.dt, max_history=2 * HISTORY_FRAMES))
            for c in scenario.cav_ids
        }
        p = cfg.predictor
        self.intentions = intentions or default_intentions(
            p.K, p.T_f, cfg.intention_seed, cfg.intention_scenarios, p.reference_speed
        )
        if self.intentions.K != p.K:
            raise ValueError(f"intention set has K={self.intentions.K}, predictor expects {p.K}")
        self.lanes = LaneIndex(scenario.map)
        self.last_eval_frame = scenario.n_frames - FUTURE_FRAMES - 1
        self.frames: list[dict] = []
        self.prediction_records: list[dict] = []
        self.consumed: list[dict] = []

    # -- per-frame pieces ---------------------------------------------------

    def _sense(self, t: int, truth) -> dict[int, DetectionEvidence]:
        cfg = self.cfg
        evidence = {c: sense_local(truth.cav_poses[c], truth, cfg.sensor, cfg.seed, c) for c in self.scenario.cav_ids}
        if cfg.mode.shares_features:
            for c, e in evidence.items():
                q = quantize_evidence(e, cfg.compression, cfg.sensor, cfg.seed)
                for r in self.scenario.cav_ids:
                    if r != c:
                        self.channel.send(Message(c, r, t, FEATURE, q.nominal_feature_bytes, q), t)
        return evidence

    def _fuse(self, t: int, ego: int, own: DetectionEvidence, pose: Pose2D) -> list[BoundingBox3D]:
        received = []
        if self.cfg.mode.shares_features:
            for sender, m in self.channel.poll(ego, t, FEATURE).items():
                received.append(align_evidence(m.payload, pose))
                self.consumed.append({"frame": t, "ego": ego, "kind": FEATURE, "sender": sender, "frame_sent": m.frame_sent})
        fused = fuse_detections(own, received).boxes
        a = self.scenario.agent(ego)
        me = BoundingBox3D(0.0, 0.0, a.h / 2, 0.0, a.l, a.w, a.h)
        return [b for b in fused if iou_3d(b, me) < SELF_IOU]

    def _predict(self, t: int, ego: int, tracks) -> dict[int, Any]:
        hist = track_histories(tracks, t, HISTORY_FRAMES)
        out = {}
        for trk in tracks:
            g = predict_agent([h.box for h in hist[trk.id]], self.lanes, self.intentions, self.cfg.predictor, t, trk.id)
            out[trk.id] = g
        return out

    def _match_gt(self, t: int, ego: int, pose: Pose2D, tracks, truth):
        """Evaluable GT agents in the ego window, and their IoU-matched track (or None)."""
        half = self.cfg.eval_range
        gts = []
        for aid, b in truth.boxes:
            if aid == ego or not _in_window(transform_box(b, WORLD, pose), half):
                continue
            fut = future_positions(self.scenario, aid, t, FUTURE_FRAMES)
            if fut is not None:
                gts.append((aid, b, fut))
        assigned: dict[int, int] = {}
        if gts and tracks:
            M = iou_matrix([b for _, b, _ in gts], [trk.box for trk in tracks])
            rr, cc = linear_sum_assignment(np.where(M >= TRACK_IOU, M, 0.0), maximize=True)
            for r, c in zip(rr, cc):
                if M[r, c] >= TRACK_IOU:
                    assigned[r] = c
        return [(aid, fut, tracks[assigned[i]] if i in assigned else None) for i, (aid, _, fut) in enumerate(gts)]

    def _remote_forecasts(self, t: int, ego: int):
        """Bundles generated at ``t - 1`` with each agent's world position predicted for ``t``."""
        out = []
        for sender, m in self.channel.poll(ego, t, PREDICTION).items():
            b: PredictionBundle = m.payload
            if b.frame_generated != t - 1:
                continue  # only the previous frame's bundle is usable
            self.consumed.append({"frame": t, "ego": ego, "kind": PREDICTION, "sender": sender, "frame_sent": m.frame_sent, "frame_generated": b.frame_generated})
            ids = list(b.trajectories)
            local = np.array(
                [[float(g.params[0, :, P] @ g.params[0, :, c]) for c in (MU_X, MU_Y)] for g in b.trajectories.values()]
            ).reshape(-1, 2)
            world = transform_points(local, b.pose, WORLD)
            out.append((sender, b, {aid: tuple(xy) for aid, xy in zip(ids, world)}))
        return out

    def _evaluate(self, t, ego, pose, truth, tracks, ego_preds, agg_preds, area):
        for aid, fut, trk in self._match_gt(t, ego, pose, tracks, truth):
            rec = {"frame": t, "cav": ego, "agent": aid, "hull": _r(area)}
            if trk is None:
                rec["track"] = None
                self.prediction_records.append(rec)
                continue
            rec["track"] = trk.id
            for name, preds in (("ego", ego_preds), ("agg", agg_preds)):
                if preds is None:
                    continue
                ev = prediction_ade_fde(preds[trk.id], fut)
                rec[name] = {"ade": [_r(ev.ade[h]) for h in HORIZONS], "fde": [_r(ev.fde[h]) for h in HORIZONS]}
            self.prediction_records.append(rec)

    # -- main loop ----------------------------------------------------------

    def step(self, t: int) -> None:
        cfg = self.cfg
        truth = truth_at(self.scenario, t)
        cav_ids = self.scenario.cav_ids
        area = hull_area([truth.cav_poses[c].xy for c in cav_ids])
        evidence = self._sense(t, truth)
        self.channel.deliver(t)

        frame_log = {"frame": t, "hull": _r(area), "egos": {}}
        bundles = {}
        half = cfg.eval_range
        predict_now = cfg.predict and t <= self.last_eval_frame + 1
        for ego in cav_ids:
            pose = truth.cav_poses[ego]
            fused = self._fuse(t, ego, evidence[ego], pose)
            tracker = self.states[ego].tracker
            tracker.step([transform_box(b, pose, WORLD) for b in fused], t)
            reported = tracker.reported()

            local_gt = [(aid, transform_box(b, WORLD, pose)) for aid, b in truth.boxes if aid != ego]
            local_trk = [(trk.id, transform_box(trk.box, WORLD, pose)) for trk in reported]
            frame_log["egos"][str(ego)] = {
                "dets": [box_row(b) for b in fused if _in_window(b, half)],
                "gts": [[aid, box_row(b)] for aid, b in local_gt if _in_window(b, half)],
                "tracks": [[tid, box_row(b)] for tid, b in local_trk if _in_window(b, half)],
            }
            if not predict_now:
                continue

            ego_preds = self._predict(t, ego, reported)
            agg_preds = None
            if cfg.mode.shares_predictions:
                agg_preds = self._aggregate(t, ego, pose, reported, ego_preds)
                bundles[ego] = PredictionBundle(
                    ego,
                    t,
                    pose,
                    {aid: transform_gmm(g, WORLD, pose) for aid, g in ego_preds.items()},
                    {trk.id: (trk.mean_score, len(trk.history)) for trk in reported},
                )
            if t <= self.last_eval_frame:
                self._evaluate(t, ego, pose, truth, reported, ego_preds, agg_preds, area)
        self.frames.append(frame_log)

        # bundles leave only after every CAV has finished predicting this frame
        for sender, b in bundles.items():
            if not b.trajectories:
                continue
            for r in cav_ids:
                if r != sender:
                    self.channel.send(Message(sender, r, t, PREDICTION, b.payload_bytes, b), t)

    def _aggregate(self, t, ego, pose, tracks, ego_preds):
        cfg = self.cfg.aggregation
        remotes = self._remote_forecasts(t, ego) if t > 0 else []
        out = {}
        positions = {trk.id: (trk.box.x, trk.box.y) for trk in tracks}
        matches = [(b, match_agents(positions, now, cfg.match_gate)) for _, b, now in remotes]
        for trk in tracks:
            xy = positions[trk.id]
            rel = [ReliabilityFeatures(math.hypot(xy[0] - pose.x, xy[1] - pose.y), min(1.0, trk.mean_score), len(trk.history))]
            others = []
            for b, m in matches:
                rid = m.get(trk.id)
                if rid is None:
                    continue
                score, length = b.reliability.get(rid, (0.5, 0))
                rel.append(ReliabilityFeatures(math.hypot(xy[0] - b.pose.x, xy[1] - b.pose.y), min(1.0, score), length))
                others.append(align_delayed(transform_gmm(b.trajectories[rid], b.pose, WORLD), t))
            out[trk.id] = aggregate(ego_preds[trk.id], others, rel, cfg)
        return out

    def run(self) -> dict:
        for t in range(self.scenario.n_frames):
            self.step(t)
        return self.log()

    def log(self) -> dict:
        messages = [
            {
                "sender": d.message.sender,
                "receiver": d.message.receiver,
                "kind": d.message.kind,
                "frame_sent": d.message.frame_sent,
                "bytes": _r(d.message.payload_bytes),
                "transit": _r(d.transit),
                "dropped": d.dropped,
                "usable_frame": d.usable_frame,
            }
            for d in self.channel.history
        ]
        return {
            "config": self.cfg.to_dict(),
            "scenario": {
                "seed": self.scenario.seed,
                "n_frames": self.scenario.n_frames,
                "dt": self.scenario.dt,
                "cav_ids": list(self.scenario.cav_ids),
                "n_agents": len(self.scenario.agents),
            },
            "intentions": [[_r(v) for v in p] for p in self.intentions.points],
            "frames": self.frames,
            "predictions": self.prediction_records,
            "messages": messages,
            "consumed": self.consumed,
        }


def run(scenario: Scenario, cfg: RunConfig, intentions: IntentionSet | None = None) -> dict:
    """Execute every frame and return the run log (a JSON-ready dict)."""
    return Simulation(scenario, cfg, intentions).run()


# ----------------------------------------------------------------------------
# log audits
# ----------------------------------------------------------------------------

def audit_timing(log: dict, deadline: float | None = None) -> list[str]:
    """Check message causality and the deadline substitution rule; return violations."""
    deadline = log["config"]["channel"]["deadline"] if deadline is None else deadline
    problems = []
    sent: dict[tuple, list[dict]] = {}
    for m in log["messages"]:
        sent.setdefault((m["sender"], m["receiver"], m["kind"]), []).append(m)
        if m["transit"] > deadline + 1e-6 and not m["dropped"]:
            problems.append(f"late message not dropped: {m}")
    for c in log["consumed"]:
        frame, ego, kind, sender = c["frame"], c["ego"], c["kind"], c["sender"]
        msgs = sent.get((sender, ego, kind), [])
        # bundles leave at the end of their frame, so the current frame's bundle is never a candidate
        newest = frame if kind == FEATURE else frame - 1
        usable = [m for m in msgs if m["frame_sent"] <= newest and m["usable_frame"] <= frame]
        chosen = [m for m in msgs if m["frame_sent"] == c["frame_sent"]]
        if not chosen:
            problems.append(f"consumed a message that was never sent: {c}")
            continue
        m = chosen[0]
        if m["usable_frame"] > frame:
            problems.append(f"consumed a message before its arrival: {c}")
        if m["dropped"] and m["frame_sent"] == frame:
            problems.append(f"late message used in its own frame: {c}")
        if usable and max(u["frame_sent"] for u in usable) != c["frame_sent"]:
            problems.append(f"did not use the freshest usable message: {c}")
        if kind == FEATURE and c["frame_sent"] != frame:
            # stale evidence only in place of a late current-frame message, and then the previous frame's
            own = [x for x in msgs if x["frame_sent"] == frame]
            if own and not own[0]["dropped"]:
                problems.append(f"stale feature message used although the current one arrived: {c}")
            prev = [x for x in msgs if x["frame_sent"] == frame - 1 and x["usable_frame"] <= frame]
            if prev and c["frame_sent"] != frame - 1:
                problems.append(f"late feature message not replaced by the previous frame's: {c}")
        if kind == PREDICTION and c.get("frame_generated") != frame - 1:
            problems.append(f"prediction bundle not exactly one frame old: {c}")
    return problems
