"""Static SVG frames of a logged episode."""

from __future__ import annotations

from typing import Sequence

from .metrics import flagged_pairs
from .scenario import ScenarioFile
from .scene import footprint_corners

MARGIN = 10.0


class _Frame:
    """World (x right, y up) to SVG (y down) mapping, `scale` px per meter."""

    def __init__(self, scenario: ScenarioFile, scale: float):
        xs = [p[0] for ln in scenario.lanes for p in ln.points] or [0.0]
        ys = [p[1] for ln in scenario.lanes for p in ln.points] or [0.0]
        self.x0 = min(xs) - MARGIN
        self.y1 = max(ys) + MARGIN
        self.scale = scale
        self.width = (max(xs) + MARGIN - self.x0) * scale
        self.height = (self.y1 - (min(ys) - MARGIN)) * scale

    def to_svg(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.x0) * self.scale, (self.y1 - y) * self.scale

    def to_world(self, u: float, v: float) -> tuple[float, float]:
        return u / self.scale + self.x0, self.y1 - v / self.scale


def _pts(frame, points) -> str:
    return " ".join("%.3f,%.3f" % frame.to_svg(x, y) for x, y in points)


def _network_svg(frame: _Frame, scenario: ScenarioFile) -> list:
    out = ['<g class="network" fill="none" stroke="#999">']
    for ln in scenario.lanes:
        out.append(f'<polyline class="lane" data-lane="{ln.id}" stroke-width="{ln.width * frame.scale:.3f}" '
                   f'stroke-opacity="0.35" points="{_pts(frame, ln.points)}"/>')
    out.append("</g>")
    return out


def render_frame(record, scenario: ScenarioFile, scale: float = 2.0) -> str:
    frame = _Frame(scenario, scale)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{frame.width:.3f}" height="{frame.height:.3f}" '
        f'data-x0="{frame.x0!r}" data-y1="{frame.y1!r}" data-scale="{scale!r}">',
        f"<title>t = {record.time:.1f} s</title>",
    ]
    parts += _network_svg(frame, scenario)
    flagged = set()
    for i, j in flagged_pairs(record.agents):
        flagged.update((i, j))
    for k, a in enumerate(record.agents):
        cls = "vehicle flagged" if k in flagged else "vehicle"
        color = "#d62728" if k in flagged else "#1f77b4"
        parts.append(f'<polygon class="{cls}" data-agent="{a.agent_id}" fill="{color}" '
                     f'points="{_pts(frame, footprint_corners(a))}"/>')
        if record.commands:
            for x, y in record.commands[k].waypoints:
                u, v = frame.to_svg(x, y)
                parts.append(f'<circle class="waypoint" data-agent="{a.agent_id}" cx="{u:.3f}" cy="{v:.3f}" '
                             f'r="{0.6 * scale:.3f}" fill="#2ca02c"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_frames(records: Sequence, scenario: ScenarioFile, stride: int = 1, scale: float = 2.0) -> list:
    """One SVG document per `stride` records; a network-only frame for an empty log."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not records:
        from .records import StepRecord

        return [render_frame(StepRecord(0.0, (), ()), scenario, scale)]
    return [render_frame(records[k], scenario, scale) for k in range(0, len(records), stride)]
