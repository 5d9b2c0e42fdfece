"""Heuristic recovery expert: IDM car following plus pure-pursuit tracking of
the route centerline, conditioned on the agent's maneuver command."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .commands import Command, Maneuver
from .errors import OffMapError
from .scene import (
    DT,
    AgentState,
    Control,
    ControlBounds,
    SceneState,
    clamp_control,
    integrate_bicycle,
    wrap_angle,
)


@dataclass(frozen=True)
class ExpertConfig:
    v0: Optional[float] = None  # None: use the lane speed limit
    headway: float = 1.5
    s0: float = 2.0
    a_idm: float = 1.5
    b: float = 2.0
    exponent: float = 4.0
    lookahead_base: float = 4.0
    lookahead_gain: float = 0.5
    recovery_radius: float = 8.0
    leader_range: float = 80.0
    # stop lines / yield points needing more than this decel are run through
    b_hard: float = 4.0
    yield_range: float = 40.0
    yield_clearance: float = 3.0
    yield_speed_factor: float = 0.5
    drift_offset: float = 0.75
    drift_heading: float = 0.3
    bounds: ControlBounds = field(default_factory=ControlBounds)

    def __post_init__(self):
        for name in ("headway", "s0", "a_idm", "b", "exponent", "lookahead_base", "recovery_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ExpertConfig.{name} must be positive")
        if self.v0 is not None and self.v0 < 0:
            raise ValueError("ExpertConfig.v0 must be nonnegative")


@dataclass(frozen=True)
class RecoveryTarget:
    positions: np.ndarray  # (N, T_f, 2)

    @property
    def horizon(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class RouteFrame:
    """Agent pose expressed against its route."""

    s: float
    lateral: float
    heading_error: float
    path_heading: float


def locate(agent: AgentState, network, cfg: ExpertConfig | None = None) -> RouteFrame:
    info = network.route_info[agent.route_id]
    s, lat, ph = info.path.project(agent.x, agent.y)
    radius = cfg.recovery_radius if cfg is not None else ExpertConfig.recovery_radius
    if abs(lat) > radius:
        raise OffMapError(agent.agent_id, abs(lat))
    return RouteFrame(s, lat, wrap_angle(agent.heading - ph), ph)


def find_leader(scene: SceneState, i: int, frame: RouteFrame, cfg: ExpertConfig):
    """Nearest agent occupying the route ribbon ahead of agent i.

    Returns (bumper gap [m], leader speed along the path [m/s]) or None.
    """
    me = scene.agents[i]
    net = scene.network
    path = net.route_info[me.route_id].path
    half_lane = net.lane_at(me.route_id, frame.s).width / 2.0
    best = None
    cand = [
        j for j, o in enumerate(scene.agents)
        if j != i and math.hypot(o.x - me.x, o.y - me.y) <= cfg.leader_range + 10.0
    ]
    if not cand:
        return None
    s_all, lat_all, h_all = path.project_many([(scene.agents[j].x, scene.agents[j].y) for j in cand])
    for j, sj, latj, hj in zip(cand, s_all, lat_all, h_all):
        other = scene.agents[j]
        ahead = sj - frame.s
        if ahead <= 0.0 or ahead > cfg.leader_range:
            continue
        if abs(latj) > half_lane + other.half_width:
            continue
        rel = other.heading - hj
        extent = other.half_length * abs(math.cos(rel)) + other.half_width * abs(math.sin(rel))
        gap = ahead - me.half_length - extent
        if best is None or gap < best[0]:
            best = (float(gap), other.speed * math.cos(rel))
    return best


def idm_accel(v: float, v0: float, cfg: ExpertConfig, gap=None, v_lead: float = 0.0) -> float:
    """IDM acceleration, clamped to [a_min, a_idm]."""
    if v0 > 0:
        # the ratio is capped so a tiny desired speed cannot overflow the power
        free = cfg.a_idm * (1.0 - min(v / v0, 1e6) ** cfg.exponent)
    else:
        free = -cfg.b if v > 0 else 0.0
    acc = free
    if gap is not None:
        if gap <= 1e-3:
            acc = cfg.bounds.a_min
        else:
            dv = v - v_lead
            s_star = cfg.s0 + max(0.0, v * cfg.headway + v * dv / (2.0 * math.sqrt(cfg.a_idm * cfg.b)))
            acc = free - cfg.a_idm * (s_star / gap) ** 2
    return min(max(acc, cfg.bounds.a_min), cfg.a_idm)


def _stoppable(v: float, gap: float, cfg: ExpertConfig) -> bool:
    if gap <= 0.0:
        return False
    return v * v / (2.0 * gap) <= cfg.b_hard


def pure_pursuit_steer(agent: AgentState, frame: RouteFrame, path, cfg: ExpertConfig, offset: float = 0.0) -> float:
    ld = cfg.lookahead_base + cfg.lookahead_gain * agent.speed
    tx, ty, th = path.point_at(frame.s + ld)
    tx -= math.sin(th) * offset
    ty += math.cos(th) * offset
    dx, dy = tx - agent.x, ty - agent.y
    dist = math.hypot(dx, dy)
    if dist < 1e-6:
        return 0.0
    alpha = wrap_angle(math.atan2(dy, dx) - agent.heading)
    return math.atan(2.0 * agent.wheelbase * math.sin(alpha) / dist)


def expert_control(scene: SceneState, agent: int, cfg: ExpertConfig = ExpertConfig(), command: Command | None = None) -> Control:
    """Recovery control for one agent in the joint scene."""
    me = scene.agents[agent]
    net = scene.network
    frame = locate(me, net, cfg)
    info = net.route_info[me.route_id]
    maneuver = command.maneuver if command is not None else Maneuver.MAINTAIN
    lane = net.lane_at(me.route_id, frame.s)
    v0 = lane.speed_limit if cfg.v0 is None else cfg.v0
    v = me.speed

    offset = 0.0
    if maneuver == Maneuver.SWITCH_LEFT:
        offset = lane.width
    elif maneuver == Maneuver.SWITCH_RIGHT:
        offset = -lane.width
    steer = pure_pursuit_steer(me, frame, info.path, cfg, offset)

    if maneuver == Maneuver.YIELD:
        v0 *= cfg.yield_speed_factor
    accels = [idm_accel(v, v0, cfg)]
    lead = find_leader(scene, agent, frame, cfg)
    if lead is not None:
        accels.append(idm_accel(v, v0, cfg, lead[0], lead[1]))
    stop = net.next_stop_line(me.route_id, frame.s, scene.signals)
    if stop is not None and stop[1]:
        gap = stop[0] - me.half_length
        if _stoppable(v, gap, cfg):
            accels.append(idm_accel(v, v0, cfg, gap, 0.0))
    if maneuver == Maneuver.YIELD:
        conflict = net.next_conflict(me.route_id, frame.s)
        if conflict is not None and conflict[0] <= cfg.yield_range:
            gap = conflict[0] - me.half_length - cfg.yield_clearance
            if _stoppable(v, gap, cfg):
                accels.append(idm_accel(v, v0, cfg, gap, 0.0))
    if maneuver == Maneuver.STOP:
        accels.append(max(-cfg.b, -v / DT))
    return clamp_control(Control(min(accels), steer), cfg.bounds)


def drift_gates(scene: SceneState, cfg: ExpertConfig = ExpertConfig(), high: float = 1.0, low: float = 0.2) -> np.ndarray:
    """Per-agent trajectory-loss weight: high when the agent has drifted."""
    out = np.full(len(scene.agents), low)
    for k, a in enumerate(scene.agents):
        fr = locate(a, scene.network, cfg)
        if abs(fr.lateral) > cfg.drift_offset or abs(fr.heading_error) > cfg.drift_heading:
            out[k] = high
    return out


def expert_rollout(scene: SceneState, horizon: int, cfg: ExpertConfig = ExpertConfig(), commands: Sequence[Command] | None = None, dt: float = DT) -> RecoveryTarget:
    """Roll all agents forward jointly under the expert for `horizon` steps."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = len(scene.agents)
    pos = np.zeros((n, horizon, 2))
    cur = scene
    for t in range(horizon):
        ctrls = [
            expert_control(cur, k, cfg, None if commands is None else commands[k]) for k in range(n)
        ]
        agents = [integrate_bicycle(a, u, dt) for a, u in zip(cur.agents, ctrls)]
        for k, a in enumerate(agents):
            pos[k, t] = (a.x, a.y)
        cur = cur.with_agents(agents, time=round(cur.time + dt, 9))
    return RecoveryTarget(pos)
