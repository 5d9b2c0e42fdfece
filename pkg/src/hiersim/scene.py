"""World model: road network geometry, agent kinematics, scene history and
collision geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import HistoryDiscontinuityError, InvalidStateError, ScenarioError

DT = 0.1
# Tolerance used when comparing times that should be multiples of dt.
TIME_EPS = 1e-6


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]. Values already in range are returned untouched."""
    if -math.pi < a <= math.pi:
        return a
    r = (a + math.pi) % (2.0 * math.pi) - math.pi
    if r <= -math.pi:
        r = math.pi
    return r


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorised wrap_angle with identical rounding."""
    a = np.asarray(a, dtype=float)
    inside = (a > -math.pi) & (a <= math.pi)
    if inside.all():
        return a
    r = np.remainder(a + math.pi, 2.0 * math.pi) - math.pi
    r = np.where(r <= -math.pi, math.pi, r)
    return np.where(inside, a, r)


# ---------------------------------------------------------------------------
# agents and controls


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    wheelbase: float = 2.5
    half_length: float = 2.0
    half_width: float = 1.0
    route_id: str = ""
    agent_id: int = 0

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v)
            for v in (self.x, self.y, self.heading, self.speed, self.wheelbase)
        )

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class ControlBounds:
    a_min: float = -5.0
    a_max: float = 3.0
    steer_max: float = 0.5


@dataclass(frozen=True)
class Control:
    accel: float = 0.0
    steer: float = 0.0


def clamp_control(u: Control, bounds: ControlBounds = ControlBounds()) -> Control:
    return Control(
        accel=min(max(u.accel, bounds.a_min), bounds.a_max),
        steer=min(max(u.steer, -bounds.steer_max), bounds.steer_max),
    )


def integrate_bicycle(state: AgentState, u: Control, dt: float = DT) -> AgentState:
    """One forward-Euler step of the kinematic bicycle.

    Derivatives are taken at the pre-step state; speed is floored at zero and
    heading re-wrapped. The control is expected to be clamped already.
    """
    if not (dt > 0):
        raise InvalidStateError(f"dt must be positive, got {dt}")
    if not state.is_finite() or not (math.isfinite(u.accel) and math.isfinite(u.steer)):
        raise InvalidStateError(f"non-finite state or control for agent {state.agent_id}")
    v = state.speed
    th = state.heading
    x = state.x + v * math.cos(th) * dt
    y = state.y + v * math.sin(th) * dt
    heading = wrap_angle(th + v * math.tan(u.steer) / state.wheelbase * dt)
    speed = max(0.0, v + u.accel * dt)
    return replace(state, x=x, y=y, heading=heading, speed=speed)


# ---------------------------------------------------------------------------
# footprints

N_DISCS = 3


def vehicle_discs(agent: AgentState) -> tuple[np.ndarray, float]:
    """Three equal discs along the body axis covering the rectangle.

    Returns (centers of shape (3, 2), radius). A body with half_length 0
    degenerates to a single disc of radius half_width.
    """
    c, s = math.cos(agent.heading), math.sin(agent.heading)
    spacing = 2.0 * agent.half_length / N_DISCS
    offsets = np.array([-spacing, 0.0, spacing])
    centers = np.column_stack([agent.x + offsets * c, agent.y + offsets * s])
    radius = math.hypot(agent.half_length / N_DISCS, agent.half_width)
    return centers, radius


def disc_radius(agent: AgentState) -> float:
    return math.hypot(agent.half_length / N_DISCS, agent.half_width)


def footprint_corners(agent: AgentState) -> np.ndarray:
    """Rectangle corners (4, 2), counter-clockwise."""
    c, s = math.cos(agent.heading), math.sin(agent.heading)
    fwd = np.array([c, s]) * agent.half_length
    left = np.array([-s, c]) * agent.half_width
    p = np.array([agent.x, agent.y])
    return np.array([p + fwd - left, p + fwd + left, p - fwd + left, p - fwd - left])


def detect_collisions(scene: "SceneState") -> list[tuple[int, int]]:
    """Index pairs (i < j) whose disc footprints overlap, sorted."""
    return collision_pairs(scene.agents)


def collision_pairs(agents: Sequence[AgentState]) -> list[tuple[int, int]]:
    n = len(agents)
    if n < 2:
        return []
    centers = np.empty((n, N_DISCS, 2))
    radii = np.empty(n)
    for k, a in enumerate(agents):
        centers[k], radii[k] = vehicle_discs(a)
    diff = centers[:, None, :, None, :] - centers[None, :, None, :, :]
    dist = np.sqrt((diff**2).sum(-1)).min(axis=(2, 3))
    touch = dist < (radii[:, None] + radii[None, :])
    iu, ju = np.nonzero(np.triu(touch, k=1))
    return sorted(zip(iu.tolist(), ju.tolist()))


# ---------------------------------------------------------------------------
# road network


class Path:
    """Arc-length parametrised polyline with linear extrapolation past its ends."""

    def __init__(self, points: Sequence[Sequence[float]]):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ScenarioError("polyline needs at least two 2-D points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        keep = seg_len > 1e-9
        if not keep.all():
            pts = np.vstack([pts[0], pts[1:][keep]])
            seg = np.diff(pts, axis=0)
            seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if len(seg_len) == 0:
            raise ScenarioError("polyline has zero length")
        self.points = pts
        self.seg = seg
        self.seg_len = seg_len
        self.unit = seg / seg_len[:, None]
        self.s0 = np.concatenate([[0.0], np.cumsum(seg_len)[:-1]])
        self.length = float(seg_len.sum())
        self.seg_heading = np.arctan2(seg[:, 1], seg[:, 0])

    def _segment_at(self, s: float) -> int:
        k = int(np.searchsorted(self.s0, s, side="right")) - 1
        return min(max(k, 0), len(self.seg_len) - 1)

    def point_at(self, s: float) -> tuple[float, float, float]:
        k = self._segment_at(s)
        ds = s - self.s0[k]
        p = self.points[k] + self.unit[k] * ds
        return float(p[0]), float(p[1]), float(self.seg_heading[k])

    def heading_at(self, s: float) -> float:
        return float(self.seg_heading[self._segment_at(s)])

    def project(self, x: float, y: float) -> tuple[float, float, float]:
        """Return (arc length, signed lateral offset [left +], path heading)."""
        p = np.array([x, y])
        rel = p - self.points[:-1]
        t = np.einsum("ij,ij->i", rel, self.unit)
        tc = np.clip(t, 0.0, self.seg_len)
        # extrapolate off the two ends
        tc[0] = min(t[0], self.seg_len[0])
        tc[-1] = max(t[-1], 0.0) if len(tc) > 1 else t[-1]
        q = self.points[:-1] + self.unit * tc[:, None]
        d2 = ((p - q) ** 2).sum(axis=1)
        k = int(np.argmin(d2))
        u = self.unit[k]
        r = p - q[k]
        lateral = float(u[0] * r[1] - u[1] * r[0])
        return float(self.s0[k] + tc[k]), lateral, float(self.seg_heading[k])

    def project_many(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised `project` for an (m, 2) array of points."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        rel = pts[:, None, :] - self.points[None, :-1, :]
        t = (rel * self.unit[None]).sum(-1)
        tc = np.clip(t, 0.0, self.seg_len[None, :])
        tc[:, 0] = np.minimum(t[:, 0], self.seg_len[0])
        if tc.shape[1] > 1:
            tc[:, -1] = np.maximum(t[:, -1], 0.0)
        else:
            tc[:, -1] = t[:, -1]
        q = self.points[None, :-1, :] + self.unit[None] * tc[:, :, None]
        d2 = ((pts[:, None, :] - q) ** 2).sum(-1)
        k = np.argmin(d2, axis=1)
        rows = np.arange(len(pts))
        u = self.unit[k]
        r = pts - q[rows, k]
        lateral = u[:, 0] * r[:, 1] - u[:, 1] * r[:, 0]
        return self.s0[k] + tc[rows, k], lateral, self.seg_heading[k]


@dataclass
class Lane:
    id: str
    points: list
    width: float = 3.5
    speed_limit: float = 13.9

    def __post_init__(self):
        if len(self.points) < 2:
            raise ScenarioError(f"lane {self.id!r} needs at least two points")
        if not self.width > 0:
            raise ScenarioError(f"lane {self.id!r} width must be positive")
        if not self.speed_limit > 0:
            raise ScenarioError(f"lane {self.id!r} speed limit must be positive")
        self.path = Path(self.points)


@dataclass
class Route:
    id: str
    lanes: list


@dataclass
class SignalPhase:
    duration: float
    green: list  # lane ids allowed to enter the junction


@dataclass
class Junction:
    id: str
    center: tuple
    conflict_points: list = field(default_factory=list)
    phases: list = field(default_factory=list)  # list[SignalPhase]; empty = unsignalised
    offset: float = 0.0

    @property
    def cycle(self) -> float:
        return sum(p.duration for p in self.phases)

    def phase_at(self, t: float) -> int:
        if not self.phases:
            return -1
        tc = (t + self.offset) % self.cycle
        acc = 0.0
        for k, ph in enumerate(self.phases):
            acc += ph.duration
            if tc < acc - 1e-9:
                return k
        return len(self.phases) - 1

    @property
    def controlled_lanes(self) -> set:
        out = set()
        for ph in self.phases:
            out.update(ph.green)
        return out


@dataclass
class RouteInfo:
    path: Path
    speed_limit: float
    lane_spans: list  # (lane_id, s_start, s_end)
    stop_lines: list  # (s, junction index, lane id)
    conflicts: list  # (s, (junction index, point index))


class RoadNetwork:
    """Lanes, routes, junction conflict points and fixed-cycle signals."""

    CONFLICT_TOL = 1.0

    def __init__(self, lanes: Sequence[Lane], routes: Sequence[Route], junctions: Sequence[Junction] = ()):
        self.lanes = {ln.id: ln for ln in lanes}
        self.routes = {r.id: r for r in routes}
        self.junctions = list(junctions)
        self.route_info: dict[str, RouteInfo] = {}
        lane_junction = {}
        for ji, j in enumerate(self.junctions):
            for ph in j.phases:
                for lid in ph.green:
                    if lid not in self.lanes:
                        from .errors import ResolutionError

                        raise ResolutionError("lane", lid, f"junction {j.id!r}")
                    lane_junction[lid] = ji
        for r in routes:
            self.route_info[r.id] = self._build_route(r, lane_junction)
        pts = np.array([p for ln in lanes for p in ln.points], dtype=float).reshape(-1, 2)
        self.bounds = (tuple(pts.min(axis=0)) + tuple(pts.max(axis=0))) if len(pts) else (0.0, 0.0, 0.0, 0.0)

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        """Whether (x, y) lies inside the lanes' bounding box grown by `margin`."""
        x0, y0, x1, y1 = self.bounds
        return x0 - margin <= x <= x1 + margin and y0 - margin <= y <= y1 + margin

    def _build_route(self, r: Route, lane_junction: dict) -> RouteInfo:
        from .errors import ResolutionError

        if not r.lanes:
            raise ScenarioError(f"route {r.id!r} has no lanes")
        pts: list = []
        spans = []
        s = 0.0
        limits = []
        for lid in r.lanes:
            if lid not in self.lanes:
                raise ResolutionError("lane", lid, f"route {r.id!r}")
            lane = self.lanes[lid]
            lp = lane.path.points
            if pts:
                gap = math.dist(pts[-1], lp[0])
                if gap > 0.5:
                    raise ScenarioError(f"route {r.id!r}: lane {lid!r} does not continue the previous lane")
                pts.extend(lp[1:].tolist())
            else:
                pts.extend(lp.tolist())
            spans.append((lid, s, s + lane.path.length))
            s += lane.path.length
            limits.append(lane.speed_limit)
        path = Path(pts)
        stop_lines = [
            (s_end, lane_junction[lid], lid) for lid, _, s_end in spans if lid in lane_junction
        ]
        conflicts = []
        for ji, j in enumerate(self.junctions):
            for pi, cp in enumerate(j.conflict_points):
                cs, lat, _ = path.project(cp[0], cp[1])
                if abs(lat) <= self.CONFLICT_TOL and 0.0 <= cs <= path.length:
                    conflicts.append((cs, (ji, pi)))
        conflicts.sort()
        return RouteInfo(path, min(limits), spans, stop_lines, conflicts)

    def lane_at(self, route_id: str, s: float) -> Lane:
        info = self.route_info[route_id]
        for lid, s0, s1 in info.lane_spans:
            if s < s1:
                return self.lanes[lid]
        return self.lanes[info.lane_spans[-1][0]]

    def signal_phases(self, t: float) -> tuple:
        return tuple(j.phase_at(t) for j in self.junctions)

    def is_green(self, junction: int, lane_id: str, phases: Sequence[int]) -> bool:
        j = self.junctions[junction]
        if not j.phases:
            return True
        return lane_id in j.phases[phases[junction]].green

    def next_stop_line(self, route_id: str, s: float, phases: Sequence[int]):
        """(distance to the next stop line ahead, is-red) or None."""
        for s_stop, ji, lid in self.route_info[route_id].stop_lines:
            if s_stop > s:
                return s_stop - s, not self.is_green(ji, lid, phases)
        return None

    def next_conflict(self, route_id: str, s: float):
        """(distance, conflict key) of the first conflict point ahead of s, or None."""
        for cs, key in self.route_info[route_id].conflicts:
            if cs > s:
                return cs - s, key
        return None

    def all_conflict_points(self) -> list:
        return [cp for j in self.junctions for cp in j.conflict_points]


# ---------------------------------------------------------------------------
# scene and history


@dataclass(frozen=True)
class SceneState:
    time: float
    agents: tuple
    network: RoadNetwork
    signals: tuple = ()

    def __post_init__(self):
        if self.time < -TIME_EPS:
            raise InvalidStateError("scene time must be nonnegative")
        object.__setattr__(self, "agents", tuple(self.agents))
        if not self.signals and self.network.junctions:
            object.__setattr__(self, "signals", self.network.signal_phases(self.time))

    def with_agents(self, agents, time=None) -> "SceneState":
        t = self.time if time is None else time
        return SceneState(t, tuple(agents), self.network, self.network.signal_phases(t))

    def index_of(self, agent_id: int) -> int:
        for k, a in enumerate(self.agents):
            if a.agent_id == agent_id:
                return k
        raise KeyError(agent_id)


@dataclass(frozen=True)
class SceneHistory:
    capacity: int = 10
    dt: float = DT
    states: tuple = ()

    def __len__(self):
        return len(self.states)

    @property
    def last(self) -> SceneState:
        return self.states[-1]

    def push(self, s: SceneState) -> "SceneHistory":
        return push_history(self, s)


def push_history(h: SceneHistory, s: SceneState) -> SceneHistory:
    """Append a scene, evicting the oldest entry at capacity."""
    if h.states:
        gap = s.time - h.states[-1].time
        if abs(gap - h.dt) > TIME_EPS:
            raise HistoryDiscontinuityError(
                f"history gap {gap:.6g} s does not match dt = {h.dt:g} s"
            )
    states = h.states + (s,)
    if len(states) > h.capacity:
        states = states[len(states) - h.capacity:]
    return SceneHistory(h.capacity, h.dt, states)
