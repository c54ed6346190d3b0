"""Fusing one-frame-old remote forecasts with the ego forecast of the same agent.

Sources are weighted by closed-form reliability (distance from the sender to
the agent and the sender's detection confidence). All sources' components
are pooled, near-duplicate components from different sources are merged by
moment matching, and the K heaviest survivors form the output mixture.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .core import MU_X, MU_Y, P, RHO, SIGMA_X, SIGMA_Y, GmmTrajectory, Pose2D, covariance_to_params, params_to_covariance, transform_gmm

HEADER_BYTES = 64
FLOAT_BYTES = 4


@dataclass
class AggregationConfig:
    alpha: float = 0.05       # per meter of sender-agent distance
    beta: float = 1.0         # per unit of mean detection score
    gamma: float = 0.0        # per unit of track length, as a fraction of length_cap
    length_cap: int = 10      # frames; longer tracks earn no extra weight
    merge_eps: float = 1.0    # meters, per-step merge distance at zero spread
    merge_sigma: float = 2.0  # extra merge distance per meter of the pair's mean position sigma
    match_gate: float = 3.0   # meters, ego/remote agent correspondence gate

    def __post_init__(self):
        if self.merge_eps < 0 or self.merge_sigma < 0 or self.match_gate <= 0:
            raise ValueError("merge_eps and merge_sigma must be >= 0 and match_gate > 0")
        if self.length_cap < 1:
            raise ValueError("length_cap must be >= 1")

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "AggregationConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ReliabilityFeatures:
    distance: float
    score: float
    track_length: int = 0

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("distance must be >= 0")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


@dataclass(frozen=True)
class PredictionBundle:
    """All forecasts one CAV made at one frame, in that CAV's own frame."""

    sender: int
    frame_generated: int
    pose: Pose2D
    trajectories: Mapping[int, GmmTrajectory]
    reliability: Mapping[int, tuple[float, int]] = field(default_factory=dict)  # track id -> (mean score, length)

    def __post_init__(self):
        shapes = {g.params.shape for g in self.trajectories.values()}
        if len(shapes) > 1:
            raise ValueError(f"bundle trajectories disagree on (T_f, K): {sorted(shapes)}")

    @property
    def payload_bytes(self) -> int:
        n = sum(g.params.size for g in self.trajectories.values())
        return n * FLOAT_BYTES + HEADER_BYTES

    def in_frame(self, receiver: Pose2D) -> dict[int, GmmTrajectory]:
        return {aid: transform_gmm(g, self.pose, receiver) for aid, g in self.trajectories.items()}


def align_delayed(remote: GmmTrajectory, target_frame: int) -> GmmTrajectory:
    """Shift a forecast made one frame ago so that step 0 describes ``target_frame + 1``.

    The first step is dropped and one step is appended at the far end by
    constant-velocity extrapolation of each component's mean and sigma.
    """
    if remote.t_generated != target_frame - 1:
        raise ValueError(
            f"expected a forecast generated at frame {target_frame - 1}, got {remote.t_generated}"
        )
    prm = np.asarray(remote.params)
    last = prm[-1].copy()
    if remote.T >= 2:
        prev = prm[-2]
        for col in (MU_X, MU_Y, SIGMA_X, SIGMA_Y):
            last[:, col] = prm[-1, :, col] + (prm[-1, :, col] - prev[:, col])
        last[:, SIGMA_X] = np.maximum(last[:, SIGMA_X], prm[-1, :, SIGMA_X])
        last[:, SIGMA_Y] = np.maximum(last[:, SIGMA_Y], prm[-1, :, SIGMA_Y])
    out = np.concatenate([prm[1:], last[None]], axis=0)
    return GmmTrajectory(out, target_frame, remote.agent_id)


def match_agents(ego_xy: Mapping[int, Any], remote_xy: Mapping[int, Any], gate: float = 3.0) -> dict[int, int]:
    """Greedy one-to-one nearest-position matching, closest pairs first, within ``gate`` meters."""
    pairs = []
    for e, pe in ego_xy.items():
        for r, pr in remote_xy.items():
            d = math.hypot(pe[0] - pr[0], pe[1] - pr[1])
            if d <= gate:
                pairs.append((d, e, r))
    pairs.sort()
    out: dict[int, int] = {}
    used = set()
    for d, e, r in pairs:
        if e in out or r in used:
            continue
        out[e] = r
        used.add(r)
    return dict(sorted(out.items()))


def source_weights(
    rel: Sequence[ReliabilityFeatures], alpha: float, beta: float, gamma: float = 0.0, length_cap: int = 10
) -> np.ndarray:
    logits = np.array(
        [-alpha * r.distance + beta * r.score + gamma * min(r.track_length, length_cap) / length_cap for r in rel],
        dtype=float,
    )
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def _moment_match(prm: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Collapse components ``prm`` (n, T, 6) with per-step weights ``w`` (n, T) into one (T, 6)."""
    tot = w.sum(axis=0)
    a = w / tot
    mu = np.einsum("nt,ntd->td", a, prm[..., MU_X:MU_Y + 1])
    cov = params_to_covariance(prm[..., SIGMA_X], prm[..., SIGMA_Y], prm[..., RHO])
    spread = prm[..., MU_X:MU_Y + 1] - mu[None]
    cov = cov + spread[..., :, None] * spread[..., None, :]
    cov = np.einsum("nt,ntij->tij", a, cov)
    sx, sy, rho = covariance_to_params(cov)
    out = np.empty((prm.shape[1], 6))
    out[:, P] = tot
    out[:, MU_X:MU_Y + 1] = mu
    out[:, SIGMA_X], out[:, SIGMA_Y], out[:, RHO] = sx, sy, rho
    return out


def aggregate(
    ego: GmmTrajectory,
    remotes: Sequence[GmmTrajectory],
    rel: Sequence[ReliabilityFeatures],
    cfg: AggregationConfig | None = None,
) -> GmmTrajectory:
    """Reliability-weighted mixture fusion.

    Args:
        ego: the receiver's own forecast; its K, T_f and labels are kept.
        remotes: aligned forecasts of the same agent from other CAVs, ego frame.
        rel: one entry per source, ego first.
        cfg: weighting and merge parameters.

    Returns:
        A K-component mixture whose weights sum to one at every step.
    """
    if ego is None:
        raise ValueError("aggregation needs the ego forecast")
    cfg = cfg or AggregationConfig()
    if not remotes:
        return ego
    if len(rel) != len(remotes) + 1:
        raise ValueError("need one ReliabilityFeatures per source (ego first)")
    for r in remotes:
        if r.params.shape != ego.params.shape:
            raise ValueError(f"shape mismatch: ego {ego.params.shape}, remote {r.params.shape}")

    ws = source_weights(rel, cfg.alpha, cfg.beta, cfg.gamma, cfg.length_cap)
    sources = [ego, *remotes]
    T, K = ego.T, ego.K
    comps = np.concatenate([np.transpose(np.asarray(g.params), (1, 0, 2)) for g in sources])  # (S*K, T, 6)
    src = np.repeat(np.arange(len(sources)), K)
    w = comps[..., P] * np.repeat(ws, K)[:, None]  # (S*K, T)
    mean_w = w.mean(axis=1)
    means = comps[..., MU_X:MU_Y + 1]

    # heaviest first; ties broken on content so the remote order never matters
    order = list(np.lexsort((means[:, 0, 1], means[:, 0, 0], means[:, -1, 1], means[:, -1, 0], src != 0, -mean_w)))
    rank_of = np.empty(len(order), dtype=int)
    rank_of[order] = np.arange(len(order))
    diff = means[:, None] - means[None, :]
    sep_t = np.sqrt(np.einsum("ijtd,ijtd->ijt", diff, diff))  # (n, n, T)
    # the gate widens with the pair's spread, so slowly drifting copies of one mode still merge
    spread = np.sqrt(0.5 * (comps[..., SIGMA_X] ** 2 + comps[..., SIGMA_Y] ** 2))  # (n, T)
    gate = cfg.merge_eps + cfg.merge_sigma * 0.5 * (spread[:, None] + spread[None, :])
    sep = np.max(sep_t - gate, axis=-1)  # <= 0 where every step is inside the gate
    mergeable = (src[:, None] != src[None, :]) & (sep <= 0.0)
    # candidate partners of each component, nearest first
    sep_l, rank_l = sep.tolist(), rank_of.tolist()
    partners = [[] for _ in range(len(comps))]
    for i, j in zip(*np.nonzero(mergeable)):
        partners[i].append(j)
    for i, p in enumerate(partners):
        if len(p) > 1:
            p.sort(key=lambda j, i=i: (sep_l[i][j], rank_l[j]))
    src_l = src.tolist()
    taken = [False] * len(comps)
    clusters: list[list[int]] = []
    for i in order:
        if taken[i]:
            continue
        taken[i] = True
        members = [i]
        used_src = {src_l[i]}
        for j in partners[i]:
            if taken[j] or src_l[j] in used_src:
                continue
            used_src.add(src_l[j])
            taken[j] = True
            members.append(j)
        clusters.append(members)

    # cluster weight is additive, so rank before paying for moment matching
    mw = mean_w.tolist()
    cw = [sum(mw[i] for i in m) for m in clusters]
    by_weight = sorted(range(len(clusters)), key=lambda c: (-cw[c], c))[:K]

    # ego-anchored clusters keep the ego component order; the rest follow by weight
    def anchor(pos_c):
        pos, c = pos_c
        ego_members = [i for i in clusters[c] if src_l[i] == 0]
        return (0, ego_members[0]) if ego_members else (1, pos)

    keep = [c for _, c in sorted(enumerate(by_weight), key=anchor)]
    out = np.empty((T, len(keep), 6))
    for slot, c in enumerate(keep):
        m = clusters[c]
        if len(m) == 1:
            out[:, slot] = comps[m[0]]
            out[:, slot, P] = w[m[0]]
        else:
            out[:, slot] = _moment_match(comps[m], w[m])
    out[..., P] /= out[..., P].sum(axis=1, keepdims=True)
    return GmmTrajectory(out, ego.t_generated, ego.agent_id)
