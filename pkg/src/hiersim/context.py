"""Per-step route context for every agent, computed once and cached on the scene."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .scene import SceneState, wrap_angle

CONFLICT_HORIZON = 40.0


@dataclass(frozen=True)
class AgentContext:
    s: float
    lateral: float
    heading_error: float
    path_heading: float
    route_length: float
    lane_width: float
    speed_limit: float
    conflict_dist: float  # inf when no conflict point lies ahead
    upcoming: frozenset  # conflict keys within CONFLICT_HORIZON ahead
    upcoming_dist: dict
    stop_dist: float  # inf when no stop line ahead
    stop_red: bool


def _agent_context(agent, net, phases) -> AgentContext:
    info = net.route_info[agent.route_id]
    s, lat, ph = info.path.project(agent.x, agent.y)
    upcoming = {}
    first = math.inf
    for cs, key in info.conflicts:
        if cs > s:
            d = cs - s
            first = min(first, d)
            if d <= CONFLICT_HORIZON:
                upcoming.setdefault(key, d)
    stop = net.next_stop_line(agent.route_id, s, phases)
    lane = net.lane_at(agent.route_id, s)
    return AgentContext(
        s=s,
        lateral=lat,
        heading_error=wrap_angle(agent.heading - ph),
        path_heading=ph,
        route_length=info.path.length,
        lane_width=lane.width,
        speed_limit=lane.speed_limit,
        conflict_dist=first,
        upcoming=frozenset(upcoming),
        upcoming_dist=upcoming,
        stop_dist=stop[0] if stop else math.inf,
        stop_red=bool(stop[1]) if stop else False,
    )


def scene_context(scene: SceneState) -> list:
    cached = scene.__dict__.get("_ctx")
    if cached is None:
        cached = [_agent_context(a, scene.network, scene.signals) for a in scene.agents]
        object.__setattr__(scene, "_ctx", cached)
    return cached
