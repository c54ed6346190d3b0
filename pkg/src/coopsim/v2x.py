"""V2X channel model: bandwidth-limited links, the 100 ms deadline, accounting.

Every broadcast is modelled as independent unicast links carrying identical
payloads. A message's transit time is ``base_latency + jitter +
payload_bytes / bandwidth``.

Timing convention: the cooperative stage of frame ``f`` runs once the
collection window closes, at ``f * dt + deadline``. A message sent at frame
``f`` whose transit fits the deadline has therefore arrived in time and is
used at ``f`` itself. A message whose transit exceeds the deadline is dropped
for frame ``f``, which falls back to the freshest earlier message from that
sender (normally frame ``f - 1``'s); the late message itself can still serve
a later frame once it has arrived. Usability is resolved in whole frames to
avoid float drift.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

from .core import derive_rng
from .sensing import DetectionEvidence

FEATURE = "feature"
PREDICTION = "prediction"
KINDS = (FEATURE, PREDICTION)
BROADCAST = -1
_EPS = 1e-9


@dataclass
class ChannelConfig:
    bandwidth: float = 4.0e8          # bytes per second per link
    base_latency: float = 0.01        # seconds
    deadline: float = 0.100           # seconds
    latency_jitter: float = 0.012     # extra uniform [0, jitter) seconds, seeded per message
    seed: int = 0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.deadline > 0:
            raise ValueError("deadline must be positive")
        if self.base_latency < 0 or self.latency_jitter < 0:
            raise ValueError("latencies must be >= 0")

    @classmethod
    def ideal(cls, deadline: float = 0.100) -> "ChannelConfig":
        """Zero-latency, unlimited-bandwidth link (the no-delay setting)."""
        return cls(bandwidth=math.inf, base_latency=0.0, deadline=deadline, latency_jitter=0.0)

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "ChannelConfig":
        d = dict(d or {})
        if isinstance(d.get("bandwidth"), str):
            d["bandwidth"] = float(d["bandwidth"])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    frame_sent: int
    kind: str
    payload_bytes: float
    payload: Any = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if not self.payload_bytes > 0:
            raise ValueError("payload_bytes must be positive")
        if self.payload is not None:
            is_feature = isinstance(self.payload, DetectionEvidence)
            if (self.kind == FEATURE) != is_feature:
                raise ValueError(f"payload {type(self.payload).__name__} does not match kind {self.kind!r}")


@dataclass(frozen=True)
class Delivery:
    """A transmitted message with its resolved timing."""

    message: Message
    transit: float
    arrival: float
    dropped: bool
    usable_frame: int  # first frame at which the message may be read


@dataclass
class LinkCounters:
    bytes: float = 0.0
    messages: int = 0
    drops: int = 0


@dataclass
class LinkLog:
    links: dict[tuple[int, int, str], LinkCounters] = field(default_factory=lambda: defaultdict(LinkCounters))

    def record(self, m: Message, dropped: bool) -> None:
        c = self.links[(m.sender, m.receiver, m.kind)]
        c.bytes += m.payload_bytes
        c.messages += 1
        c.drops += int(dropped)

    def total_drops(self, kind: str | None = None) -> int:
        return sum(c.drops for k, c in self.links.items() if kind is None or k[2] == kind)

    def total_bytes(self, kind: str | None = None) -> float:
        return sum(c.bytes for k, c in self.links.items() if kind is None or k[2] == kind)


def transit_time(m: Message, ch: ChannelConfig) -> float:
    jitter = 0.0
    if ch.latency_jitter > 0:
        rng = derive_rng(ch.seed, m.sender, m.receiver, m.frame_sent, m.kind, "jitter")
        jitter = ch.latency_jitter * float(rng.random())
    serialisation = 0.0 if math.isinf(ch.bandwidth) else m.payload_bytes / ch.bandwidth
    return ch.base_latency + jitter + serialisation


def transmit(m: Message, ch: ChannelConfig, clock: int, dt: float = 0.1, log: LinkLog | None = None) -> float:
    """Schedule ``m`` sent at frame ``clock``; return its arrival time in seconds."""
    transit = transit_time(m, ch)
    if log is not None:
        log.record(m, transit > ch.deadline + _EPS)
    return clock * dt + transit


def usable_frame(frame_sent: int, transit: float, ch: ChannelConfig, dt: float) -> int:
    """First frame whose collection window (closing at ``f * dt + deadline``) contains the arrival.

    A message over the deadline misses its own frame and becomes usable at a
    later one, where it stands in for the newer message that is still in flight.
    """
    return frame_sent + max(0, math.ceil((transit - ch.deadline) / dt - _EPS))


def _delivery(m: Message, ch: ChannelConfig, clock: int, dt: float) -> Delivery:
    transit = transit_time(m, ch)
    usable = usable_frame(clock, transit, ch, dt)
    return Delivery(m, transit, clock * dt + transit, transit > ch.deadline + _EPS, usable)


def poll(
    receiver: int,
    frame: int,
    ch: ChannelConfig,
    inbox: Iterable[Delivery],
    kind: str = FEATURE,
) -> dict[int, Message]:
    """Freshest usable message per sender.

    A message over the deadline is never returned for its own frame, so the
    previous frame's message stands in for it; senders with nothing usable
    yet are absent.
    """
    best: dict[int, Delivery] = {}
    for d in inbox:
        m = d.message
        if m.receiver not in (receiver, BROADCAST) or m.kind != kind or m.sender == receiver:
            continue
        if m.frame_sent > frame or d.usable_frame > frame:
            continue
        cur = best.get(m.sender)
        if cur is None or m.frame_sent > cur.message.frame_sent:
            best[m.sender] = d
    return {s: d.message for s, d in sorted(best.items())}


def bandwidth_report(log: LinkLog, duration: float) -> dict[str, Any]:
    """Megabytes per second, overall per kind, per kind averaged over links, and per link."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    by_kind: dict[str, float] = {k: 0.0 for k in KINDS}
    link_counts: dict[str, int] = {k: 0 for k in KINDS}
    by_link: dict[str, float] = {}
    for (s, r, kind), c in sorted(log.links.items()):
        rate = c.bytes / duration / 1e6
        by_kind[kind] += rate
        link_counts[kind] += 1
        by_link[f"{s}->{r}:{kind}"] = rate
    per_link = {k: (by_kind[k] / link_counts[k] if link_counts[k] else 0.0) for k in KINDS}
    return {"by_kind": by_kind, "per_link_mean": per_link, "by_link": by_link}


class Channel:
    """Frame-synchronous event queue shared by all CAVs of one run.

    ``send`` records accounting immediately; ``deliver(frame)`` releases every
    message usable at ``frame`` into the inbox. Only the freshest delivered
    message per (sender, receiver, kind) is retained.
    """

    def __init__(self, config: ChannelConfig, dt: float = 0.1):
        self.config = config
        self.dt = dt
        self.log = LinkLog()
        self.history: list[Delivery] = []
        self._pending: list[Delivery] = []
        self._inbox: dict[tuple[int, int, str], Delivery] = {}

    def send(self, m: Message, frame: int) -> Delivery:
        d = _delivery(m, self.config, frame, self.dt)
        self.log.record(m, d.dropped)
        self.history.append(d)
        self._pending.append(d)
        return d

    def deliver(self, frame: int) -> None:
        keep = []
        for d in self._pending:
            if d.usable_frame <= frame:
                key = (d.message.sender, d.message.receiver, d.message.kind)
                cur = self._inbox.get(key)
                if cur is None or d.message.frame_sent > cur.message.frame_sent:
                    self._inbox[key] = d
            else:
                keep.append(d)
        self._pending = keep

    def inbox(self, receiver: int) -> list[Delivery]:
        return [d for (s, r, k), d in sorted(self._inbox.items()) if r == receiver]

    def poll(self, receiver: int, frame: int, kind: str = FEATURE) -> dict[int, Message]:
        return poll(receiver, frame, self.config, self.inbox(receiver), kind)
