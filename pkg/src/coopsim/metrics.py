"""Detection, tracking and prediction metrics, plus the CAV convex-hull area."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import P, BoundingBox3D, GmmTrajectory, iou_matrix

IOU_THRESHOLDS = (0.3, 0.5, 0.7)
TRACK_IOU = 0.25
RECALL_POINTS = 40
HORIZONS = (10, 30, 50)   # steps at dt 0.1: 1 s, 3 s, 5 s


# ----------------------------------------------------------------------------
# detection
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PRResult:
    ap: float
    ar: float
    f1: float
    n_gt: int
    n_det: int


def _frame_hits(dets: Sequence[BoundingBox3D], gts: Sequence[BoundingBox3D], iou_t: float) -> np.ndarray:
    """True-positive flags for ``dets`` after score-ordered greedy matching."""
    tp = np.zeros(len(dets), dtype=bool)
    if not dets or not gts:
        return tp
    ious = iou_matrix(list(dets), list(gts))
    free = np.ones(len(gts), dtype=bool)
    for i in sorted(range(len(dets)), key=lambda i: -dets[i].score):
        cand = np.where(free, ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_t:
            tp[i] = True
            free[j] = False
    return tp


def pr_from_hits(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> PRResult:
    """All-point interpolated AP, final recall, best F1 over score thresholds."""
    n_det = len(scores)
    if n_gt == 0 or n_det == 0:
        return PRResult(0.0, 0.0, 0.0, n_gt, n_det)
    order = np.argsort(-scores, kind="stable")
    hits = tp[order].astype(float)
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # thresholds sit between distinct scores only
    s = scores[order]
    last = np.r_[s[1:] != s[:-1], True]
    recall, precision = recall[last], precision[last]
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    ap = float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return PRResult(ap, float(recall[-1]), float(f1.max()), n_gt, n_det)


def detection_pr(dets, gts, iou_t: float) -> PRResult:
    """AP, AR and F1 for one frame, or for many when given lists of per-frame lists.

    Args:
        dets: scored boxes, or a list of per-frame box lists.
        gts: ground-truth boxes in the same layout.
        iou_t: match threshold in (0, 1).
    """
    if not 0.0 < iou_t < 1.0:
        raise ValueError("iou_t must lie in (0, 1)")
    frames_d = dets if dets and not isinstance(dets[0], BoundingBox3D) else [dets]
    frames_g = gts if gts and not isinstance(gts[0], BoundingBox3D) else [gts]
    if len(frames_d) != len(frames_g):
        if not dets:
            frames_d = [[] for _ in frames_g]
        elif not gts:
            frames_g = [[] for _ in frames_d]
        else:
            raise ValueError("dets and gts cover different numbers of frames")
    scores, tps, n_gt = [], [], 0
    for d, g in zip(frames_d, frames_g):
        tps.append(_frame_hits(d, g, iou_t))
        scores.append(np.array([b.score for b in d], dtype=float))
        n_gt += len(g)
    return pr_from_hits(np.concatenate(scores) if scores else np.zeros(0), np.concatenate(tps) if tps else np.zeros(0, bool), n_gt)


# ----------------------------------------------------------------------------
# tracking (CLEAR MOT and the recall-averaged variants)
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrackingEval:
    mota: float
    motp: float
    amota: float
    amotp: float
    samota: float
    mt: float
    ml: float
    idsw: int
    fp: int
    fn: int
    n_gt: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Clear:
    tp: int
    fp: int
    fn: int
    idsw: int
    iou_sum: float
    matched_scores: list
    coverage: dict  # gt id -> (matched frames, present frames)


def _clear(frames, ious, min_score: float, iou_t: float) -> _Clear:
    """One CLEAR MOT pass over ``frames`` keeping only tracks scoring >= ``min_score``."""
    tp = fp = fn = idsw = 0
    iou_sum = 0.0
    scores = []
    last_match: dict = {}   # gt id -> last track id
    prev: dict = {}         # gt id -> track id in previous frame
    coverage: dict = {}
    for (gts, trks), M in zip(frames, ious):
        g_ids = [g for g, _ in gts]
        keep = [i for i, (_, _, s) in enumerate(trks) if s >= min_score]
        t_ids = [trks[i][0] for i in keep]
        sub = M[:, keep] if len(keep) else np.zeros((len(gts), 0))
        pairs: dict[int, int] = {}
        # carry over last frame's correspondences that still overlap
        for gi, g in enumerate(g_ids):
            if g in prev and prev[g] in t_ids:
                ti = t_ids.index(prev[g])
                if sub[gi, ti] >= iou_t and ti not in pairs.values():
                    pairs[gi] = ti
        rest_g = [gi for gi in range(len(g_ids)) if gi not in pairs]
        rest_t = [ti for ti in range(len(t_ids)) if ti not in pairs.values()]
        if rest_g and rest_t:
            cost = sub[np.ix_(rest_g, rest_t)]
            rr, cc = linear_sum_assignment(np.where(cost >= iou_t, cost, 0.0), maximize=True)
            for r, c in zip(rr, cc):
                if cost[r, c] >= iou_t:
                    pairs[rest_g[r]] = rest_t[c]
        cur = {}
        for gi, ti in pairs.items():
            g, t = g_ids[gi], t_ids[ti]
            if g in last_match and last_match[g] != t:
                idsw += 1
            last_match[g] = t
            cur[g] = t
            iou_sum += float(sub[gi, ti])
            scores.append(trks[keep[ti]][2])
        prev = cur
        tp += len(pairs)
        fp += len(t_ids) - len(pairs)
        fn += len(g_ids) - len(pairs)
        for gi, g in enumerate(g_ids):
            m, n = coverage.get(g, (0, 0))
            coverage[g] = (m + int(gi in pairs), n + 1)
    return _Clear(tp, fp, fn, idsw, iou_sum, scores, coverage)


def tracking_metrics(frames, iou_t: float = TRACK_IOU, n_points: int = RECALL_POINTS) -> TrackingEval:
    """CLEAR MOT plus AMOTA/AMOTP/sAMOTA over ``n_points`` recall levels.

    ``frames`` is a sequence of ``(gts, tracks)`` where ``gts`` is a list of
    ``(gt_id, box)`` and ``tracks`` a list of ``(track_id, box, score)``.
    MOTA is not clamped and may be negative.
    """
    frames = [(list(g), list(t)) for g, t in frames]
    n_gt = sum(len(g) for g, _ in frames)
    if n_gt == 0:
        raise ValueError("tracking metrics are undefined without ground truth")
    ious = [
        iou_matrix([b for _, b in g], [b for _, b, _ in t]) if g and t else np.zeros((len(g), len(t)))
        for g, t in frames
    ]
    full = _clear(frames, ious, -math.inf, iou_t)
    mota = 1.0 - (full.fn + full.fp + full.idsw) / n_gt
    motp = full.iou_sum / full.tp if full.tp else 0.0
    ratios = [m / n for m, n in full.coverage.values()]
    mt = float(np.mean([r >= 0.8 for r in ratios]))
    ml = float(np.mean([r <= 0.2 for r in ratios]))

    tp_scores = np.sort(np.asarray(full.matched_scores, dtype=float))[::-1]
    amota = amotp = samota = 0.0
    for i in range(1, n_points + 1):
        r = i / n_points
        need = int(math.ceil(r * n_gt - 1e-9))
        if need > len(tp_scores) or need < 1:
            continue
        c = _clear(frames, ious, float(tp_scores[need - 1]), iou_t)
        errors = c.fp + c.fn + c.idsw
        amota += 1.0 - errors / n_gt
        samota += min(1.0, max(0.0, 1.0 - (errors - (1.0 - r) * n_gt) / (r * n_gt)))
        amotp += c.iou_sum / c.tp if c.tp else 0.0
    return TrackingEval(
        mota, motp, amota / n_points, amotp / n_points, samota / n_points, mt, ml, full.idsw, full.fp, full.fn, n_gt
    )


# ----------------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionEval:
    ade: dict  # horizon steps -> minADE_k
    fde: dict


def top_k_modes(g: GmmTrajectory, k: int = 6) -> np.ndarray:
    """(k', T, 2) means of the ``k`` components with the largest horizon-averaged weight."""
    w = np.asarray(g.params[..., P]).mean(axis=0)
    idx = np.argsort(-w, kind="stable")[: min(k, g.K)]
    return np.transpose(np.asarray(g.means)[:, idx], (1, 0, 2))


def prediction_ade_fde(pred: GmmTrajectory, gt, horizons: Sequence[int] = HORIZONS, k: int = 6) -> PredictionEval:
    gt = np.asarray(gt, dtype=float)
    if max(horizons) > pred.T:
        raise ValueError(f"horizon {max(horizons)} beyond the forecast length {pred.T}")
    if len(gt) < max(horizons):
        raise ValueError("ground truth does not cover the longest horizon")
    modes = top_k_modes(pred, k)
    err = np.linalg.norm(modes[:, : max(horizons)] - gt[None, : max(horizons)], axis=2)  # (k, T)
    ade = {h: float(err[:, :h].mean(axis=1).min()) for h in horizons}
    fde = {h: float(err[:, h - 1].min()) for h in horizons}
    return PredictionEval(ade, fde)


# ----------------------------------------------------------------------------
# convex hull
# ----------------------------------------------------------------------------

def convex_hull(points) -> np.ndarray:
    """Monotone-chain hull, counter-clockwise, without repeated endpoint."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).reshape(-1, 2))))
    if len(pts) <= 2:
        return np.array(pts).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def hull_area(cav_positions) -> float:
    hull = convex_hull(cav_positions)
    if len(hull) < 3:
        return 0.0
    x, y = hull[:, 0], hull[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


HULL_BINS = ((0.0, 50.0), (50.0, 200.0), (200.0, math.inf))
HULL_BIN_LABELS = ("<50", "50-200", ">200")


def hull_bin(area: float) -> str:
    for (lo, hi), label in zip(HULL_BINS, HULL_BIN_LABELS):
        if lo <= area < hi:
            return label
    raise ValueError(f"invalid hull area {area}")


def relative_improvement(baseline: float, ours: float) -> float:
    """(baseline - ours) / baseline, as a fraction."""
    if baseline == 0:
        return 0.0
    return (baseline - ours) / baseline


# ----------------------------------------------------------------------------
# run-log evaluation
# ----------------------------------------------------------------------------

def _boxes(rows) -> list[BoundingBox3D]:
    return [BoundingBox3D(*r) for r in rows]


def evaluate_detection(log: dict, thresholds: Sequence[float] = IOU_THRESHOLDS) -> dict:
    """AP/AR/F1 pooled over every ego and frame of a run log."""
    dets, gts = [], []
    for fr in log["frames"]:
        for ego in sorted(fr["egos"], key=int):
            e = fr["egos"][ego]
            dets.append(_boxes(e["dets"]))
            gts.append(_boxes([b for _, b in e["gts"]]))
    out = {}
    for t in thresholds:
        r = detection_pr(dets, gts, t) if dets else PRResult(0.0, 0.0, 0.0, 0, 0)
        out[f"ap@{t}"], out[f"ar@{t}"], out[f"f1@{t}"] = r.ap, r.ar, r.f1
    return out


def evaluate_tracking(log: dict, iou_t: float = TRACK_IOU) -> dict:
    """CLEAR MOT family per ego, averaged over egos."""
    per_ego: dict[str, list] = {}
    for fr in log["frames"]:
        for ego, e in fr["egos"].items():
            gts = [(aid, BoundingBox3D(*b)) for aid, b in e["gts"]]
            trks = [(tid, BoundingBox3D(*b), b[7]) for tid, b in e["tracks"]]
            per_ego.setdefault(ego, []).append((gts, trks))
    evals = [tracking_metrics(frames, iou_t) for ego, frames in sorted(per_ego.items(), key=lambda kv: int(kv[0]))
             if any(g for g, _ in frames)]
    keys = ("mota", "motp", "amota", "amotp", "samota", "mt", "ml")
    return {k: float(np.mean([getattr(e, k) for e in evals])) if evals else 0.0 for k in keys}


def evaluate_prediction(log: dict, source: str = "ego", horizons: Sequence[int] = HORIZONS) -> dict:
    """Mean minADE/minFDE over matched agents, miss count, and per-hull-bin minADE at the longest horizon."""
    recs = [r for r in log["predictions"] if r.get("track") is not None and source in r]
    out: dict = {"n": len(recs), "missed": sum(1 for r in log["predictions"] if r.get("track") is None)}
    for i, h in enumerate(horizons):
        out[f"minade@{h}"] = float(np.mean([r[source]["ade"][i] for r in recs])) if recs else float("nan")
        out[f"minfde@{h}"] = float(np.mean([r[source]["fde"][i] for r in recs])) if recs else float("nan")
    bins = {}
    for label in HULL_BIN_LABELS:
        vals = [r[source]["ade"][-1] for r in recs if hull_bin(r["hull"]) == label]
        bins[label] = {"n": len(vals), "sum": float(np.sum(vals)) if vals else 0.0}
    out["hull_bins"] = bins
    return out


def evaluate_bandwidth(log: dict) -> dict:
    """Feature/prediction traffic in MB/s (total and per link) and deadline drops."""
    duration = log["scenario"]["n_frames"] * log["scenario"]["dt"]
    out = {}
    for kind in ("feature", "prediction"):
        msgs = [m for m in log["messages"] if m["kind"] == kind]
        links = {(m["sender"], m["receiver"]) for m in msgs}
        total = sum(m["bytes"] for m in msgs)
        out[f"{kind}_mbps"] = total / duration / 1e6
        out[f"{kind}_mbps_per_link"] = total / duration / 1e6 / len(links) if links else 0.0
        out[f"{kind}_drops"] = sum(1 for m in msgs if m["dropped"])
        out[f"{kind}_messages"] = len(msgs)
    return out


def evaluate_run(log: dict) -> dict:
    """Every metric family of one run log, as a flat-ish dict."""
    out = {"detection": evaluate_detection(log), "tracking": evaluate_tracking(log), "bandwidth": evaluate_bandwidth(log)}
    if log["predictions"]:
        out["prediction"] = evaluate_prediction(log, "ego")
        if any("agg" in r for r in log["predictions"]):
            out["prediction_agg"] = evaluate_prediction(log, "agg")
    return out
