"""Closed-loop evaluation: per-km incident rates, time-to-collision, ADE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import OrderingError, ShapeError
from .scene import DT, AgentState, SceneState, collision_pairs, footprint_corners, wrap_angle

HARD_ACCEL = 2.5  # m/s^2
SHARP_TURN = math.radians(20.0)  # rad/s
TTC_FLAG = 1.5  # s


# ---------------------------------------------------------------------------
# time to collision


def _hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise convex hull (monotone chain)."""
    pts = sorted(map(tuple, points))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _velocity(a: AgentState) -> np.ndarray:
    return np.array([a.speed * math.cos(a.heading), a.speed * math.sin(a.heading)])


def _circumradius(a: AgentState) -> float:
    return math.hypot(a.half_length, a.half_width)


def ttc_agents(a: AgentState, b: AgentState) -> float:
    """Earliest t >= 0 at which the two rectangles touch under constant velocity."""
    # In a's frame b translates with the relative velocity; contact happens when
    # b's center enters the Minkowski sum of a's footprint and b's reflected one.
    pa = np.array([a.x, a.y])
    pb = np.array([b.x, b.y])
    ca = footprint_corners(a) - pa
    cb = footprint_corners(b) - pb
    poly = _hull((ca[:, None, :] - cb[None, :, :]).reshape(-1, 2))
    p0 = pb - pa
    v = _velocity(b) - _velocity(a)
    t_in, t_out = 0.0, math.inf
    m = len(poly)
    for k in range(m):
        e0, e1 = poly[k], poly[(k + 1) % m]
        edge = e1 - e0
        normal = np.array([edge[1], -edge[0]])  # outward for a ccw polygon
        dist = float(normal @ (p0 - e0))  # > 0 outside this edge
        rate = float(normal @ v)
        if rate == 0.0:
            if dist > 0.0:
                return math.inf
            continue
        t = -dist / rate
        if rate < 0.0:
            t_in = max(t_in, t)
        else:
            t_out = min(t_out, t)
        if t_in > t_out:
            return math.inf
    return t_in


def compute_ttc(scene: SceneState, pair: tuple[int, int]) -> float:
    i, j = sorted(pair)
    return ttc_agents(scene.agents[i], scene.agents[j])


def ttc_below(a: AgentState, b: AgentState, threshold: float = TTC_FLAG) -> bool:
    """TTC(a, b) < threshold, skipping the exact test when contact is impossible."""
    gap = math.hypot(b.x - a.x, b.y - a.y) - _circumradius(a) - _circumradius(b)
    closing = float(np.linalg.norm(_velocity(b) - _velocity(a)))
    if gap > 0.0 and gap >= closing * threshold:
        return False
    return ttc_agents(a, b) < threshold


_FLAG_MEMO: dict = {}


def flagged_pairs(agents: Sequence[AgentState], threshold: float = TTC_FLAG) -> list[tuple[int, int]]:
    """Index pairs (i < j) whose TTC is below `threshold`."""
    key = (id(agents), threshold)
    hit = _FLAG_MEMO.get(key)
    if hit is not None and hit[0] is agents:
        return list(hit[1])
    out = _flagged(agents, threshold)
    if isinstance(agents, tuple):
        if len(_FLAG_MEMO) > 8:
            _FLAG_MEMO.clear()
        _FLAG_MEMO[key] = (agents, tuple(out))
    return out


def _flagged(agents, threshold):
    out = []
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            if ttc_below(agents[i], agents[j], threshold):
                out.append((i, j))
    return out


# ---------------------------------------------------------------------------
# ADE


def compute_ade(executed, reference) -> float:
    """Mean Euclidean displacement over agents and steps."""
    a = np.asarray(executed, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"executed {a.shape} vs reference {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.sqrt(((a - b) ** 2).sum(-1)).mean())


# ---------------------------------------------------------------------------
# report and accumulator


@dataclass
class MetricsReport:
    avg_speed: float = 0.0
    hard_accel_per_km: float = 0.0
    sharp_turn_per_km: float = 0.0
    safety_flag_per_km: float = 0.0
    collision_per_km: float = 0.0
    ade: float = 0.0
    total_distance: float = 0.0  # km
    zero_distance: bool = True

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, bool):
                lines.append(f"{f.name}={'true' if val else 'false'}")
            else:
                lines.append(f"{f.name}={format(float(val), '.17g')}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        known = {f.name for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ValueError(f"unknown metrics key {key!r}")
            kw[key] = val.strip() == "true" if key == "zero_distance" else float(val)
        return cls(**kw)


@dataclass
class MetricsAccumulator:
    """Streaming event counter over time-ordered StepRecords.

    Hard accelerations and sharp turns are counted per agent-step; collisions
    and TTC safety flags once per contiguous episode of a given agent pair.
    """

    dt: float = DT
    agent_steps: int = 0
    speed_sum: float = 0.0
    distance_m: float = 0.0
    hard_accel: int = 0
    sharp_turn: int = 0
    safety_flags: int = 0
    collisions: int = 0
    ade_sum: float = 0.0
    ade_count: int = 0
    _last_time: float | None = None
    _last_heading: dict = field(default_factory=dict)
    _contacts: set = field(default_factory=set)
    _flags: set = field(default_factory=set)

    def add(self, record) -> None:
        t = record.time
        contiguous = self._last_time is not None and abs(t - self._last_time - self.dt) < 1e-6
        if self._last_time is not None and t <= self._last_time:
            raise OrderingError(f"record at t={t} after t={self._last_time}")
        agents = record.agents
        ids = [a.agent_id for a in agents]
        headings = {}
        for a, u in zip(agents, record.controls):
            self.agent_steps += 1
            self.speed_sum += a.speed
            self.distance_m += a.speed * self.dt
            if abs(u.accel) > HARD_ACCEL:
                self.hard_accel += 1
            prev = self._last_heading.get(a.agent_id) if contiguous else None
            if prev is not None:
                rate = wrap_angle(a.heading - prev) / self.dt
                if abs(rate) > SHARP_TURN:
                    self.sharp_turn += 1
            headings[a.agent_id] = a.heading
        contacts = {_key(ids, p) for p in collision_pairs(agents)}
        flags = {_key(ids, p) for p in flagged_pairs(agents)}
        if not contiguous:
            self._contacts, self._flags = set(), set()
        self.collisions += len(contacts - self._contacts)
        self.safety_flags += len(flags - self._flags)
        self._contacts, self._flags = contacts, flags
        self._last_heading = headings
        self._last_time = t

    def add_all(self, records: Iterable) -> "MetricsAccumulator":
        for r in records:
            self.add(r)
        return self

    def add_ade(self, displacement_sum: float, count: int) -> None:
        self.ade_sum += displacement_sum
        self.ade_count += count

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        """Combine counts of two independent shards (e.g. separate episodes)."""
        out = MetricsAccumulator(self.dt)
        for name in ("agent_steps", "speed_sum", "distance_m", "hard_accel", "sharp_turn",
                     "safety_flags", "collisions", "ade_sum", "ade_count"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    def report(self) -> MetricsReport:
        km = self.distance_m / 1000.0
        zero = km <= 0.0

        def rate(count):
            return 0.0 if zero else count / km

        return MetricsReport(
            avg_speed=self.speed_sum / self.agent_steps if self.agent_steps else 0.0,
            hard_accel_per_km=rate(self.hard_accel),
            sharp_turn_per_km=rate(self.sharp_turn),
            safety_flag_per_km=rate(self.safety_flags),
            collision_per_km=rate(self.collisions),
            ade=self.ade_sum / self.ade_count if self.ade_count else 0.0,
            total_distance=km,
            zero_distance=zero,
        )


def _key(ids, pair):
    a, b = ids[pair[0]], ids[pair[1]]
    return (a, b) if a < b else (b, a)


def accumulate(records: Iterable, dt: float = DT) -> MetricsReport:
    return MetricsAccumulator(dt).add_all(records).report()
