"""Scenario description (network, routes, spawn schedule) and the bundled
desk-scale networks: straight road, 4-way signalised intersection, 2x2 grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import Junction, Lane, RoadNetwork, Route, SignalPhase

FORMAT_VERSION = 1


@dataclass(frozen=True)
class SpawnEvent:
    time: float
    route: str
    speed: float = 0.0


@dataclass(frozen=True)
class VehicleDefaults:
    wheelbase: float = 2.5
    half_length: float = 2.0
    half_width: float = 1.0


@dataclass
class ScenarioFile:
    name: str
    lanes: list
    routes: list
    junctions: list = field(default_factory=list)
    spawns: list = field(default_factory=list)
    vehicle: VehicleDefaults = field(default_factory=VehicleDefaults)
    version: int = FORMAT_VERSION

    def build_network(self) -> RoadNetwork:
        return RoadNetwork(self.lanes, self.routes, self.junctions)


# ---------------------------------------------------------------------------
# geometry helpers

_DIRS = {"E": (1.0, 0.0), "N": (0.0, 1.0), "W": (-1.0, 0.0), "S": (0.0, -1.0)}
_OPPOSITE = {"E": "W", "W": "E", "N": "S", "S": "N"}


def _left(d):
    return np.array([-d[1], d[0]])


def _bezier(a, c, b, n=12):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * a + 2 * (1 - t) * t * c + t**2 * b


def _seg_intersection(p, p2, q, q2):
    r = p2 - p
    s = q2 - q
    den = r[0] * s[1] - r[1] * s[0]
    if abs(den) < 1e-12:
        return None
    qp = q - p
    t = (qp[0] * s[1] - qp[1] * s[0]) / den
    u = (qp[0] * r[1] - qp[1] * r[0]) / den
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return p + t * r
    return None


def _polyline_crossings(a: np.ndarray, b: np.ndarray) -> list:
    out = []
    for i in range(len(a) - 1):
        for j in range(len(b) - 1):
            x = _seg_intersection(a[i], a[i + 1], b[j], b[j + 1])
            if x is not None:
                out.append(x)
    return out


def _dedupe(points, tol=1.0):
    kept: list = []
    for p in points:
        if all(math.dist(p, k) > tol for k in kept):
            kept.append(p)
    return kept


def _r(p):
    return [round(float(p[0]), 6), round(float(p[1]), 6)]


class _GridBuilder:
    """Square grid of 4-way junctions joined by two-way single-lane roads."""

    def __init__(self, nx, ny, spacing=120.0, approach=80.0, edge=10.0, width=3.5, speed_limit=12.0,
                 green=20.0, clearance=3.0):
        self.nx, self.ny = nx, ny
        self.D, self.L, self.E, self.w = spacing, approach, edge, width
        self.v = speed_limit
        self.lanes: dict[str, Lane] = {}
        self.junctions: list[Junction] = []
        self.connectors: dict[tuple, dict] = {}
        for i in range(nx):
            for j in range(ny):
                self._add_junction((i, j), green, clearance, offset=(i + j) * 7.0)

    def center(self, node):
        return np.array([node[0] * self.D, node[1] * self.D])

    def neighbor(self, node, side):
        dx, dy = _DIRS[side]
        nb = (node[0] + int(dx), node[1] + int(dy))
        if 0 <= nb[0] < self.nx and 0 <= nb[1] < self.ny:
            return nb
        return None

    @staticmethod
    def _nid(node):
        return f"{node[0]}{node[1]}"

    def in_lane(self, node, side):
        """Lane arriving at `node` through `side`."""
        nb = self.neighbor(node, side)
        if nb is None:
            lid = f"in_{self._nid(node)}_{side}"
        else:
            lid = f"e_{self._nid(nb)}_{self._nid(node)}"
        if lid not in self.lanes:
            d = -np.array(_DIRS[side])
            n = _left(d)
            c = self.center(node)
            end = c - d * self.E - n * self.w / 2
            if nb is None:
                start = c - d * (self.E + self.L) - n * self.w / 2
            else:
                start = self.center(nb) + d * self.E - n * self.w / 2
            self.lanes[lid] = Lane(lid, [_r(start), _r(end)], self.w, self.v)
        return lid

    def out_lane(self, node, side):
        nb = self.neighbor(node, side)
        if nb is not None:
            return self.in_lane(nb, _OPPOSITE[side])
        lid = f"out_{self._nid(node)}_{side}"
        if lid not in self.lanes:
            d = np.array(_DIRS[side])
            n = _left(d)
            c = self.center(node)
            start = c + d * self.E - n * self.w / 2
            end = c + d * (self.E + self.L) - n * self.w / 2
            self.lanes[lid] = Lane(lid, [_r(start), _r(end)], self.w, self.v)
        return lid

    def _add_junction(self, node, green, clearance, offset):
        c = self.center(node)
        E, w = self.E, self.w
        polys = {}
        for s_in in _DIRS:
            d = -np.array(_DIRS[s_in])
            n = _left(d)
            a = c - d * E - n * w / 2
            for s_out in _DIRS:
                if s_out == s_in:
                    continue
                d2 = np.array(_DIRS[s_out])
                n2 = _left(d2)
                b = c + d2 * E - n2 * w / 2
                cross = d[0] * d2[1] - d[1] * d2[0]
                if abs(cross) < 1e-9:
                    pts = np.array([a, b])
                else:
                    # control point where the two tangent lines meet
                    m = np.column_stack([d, d2])
                    t, _ = np.linalg.solve(m, b - a)
                    pts = _bezier(a, a + d * t, b)
                lid = f"x_{self._nid(node)}_{s_in}{s_out}"
                self.lanes[lid] = Lane(lid, [_r(p) for p in pts], w, self.v * 0.75)
                polys[(s_in, s_out)] = pts
        self.connectors[node] = polys
        conflicts = []
        keys = list(polys)
        for ia, ka in enumerate(keys):
            for kb in keys[ia + 1:]:
                if ka[0] == kb[0]:
                    continue  # diverging from the same approach
                if ka[1] == kb[1]:
                    conflicts.append(polys[ka][-1])  # merge point
                    continue
                conflicts.extend(_polyline_crossings(polys[ka], polys[kb]))
        conflicts = [_r(p) for p in _dedupe(conflicts)]
        ew = [self.in_lane(node, "W"), self.in_lane(node, "E")]
        ns = [self.in_lane(node, "N"), self.in_lane(node, "S")]
        phases = [
            SignalPhase(green, ew),
            SignalPhase(clearance, []),
            SignalPhase(green, ns),
            SignalPhase(clearance, []),
        ]
        self.junctions.append(Junction(f"j{self._nid(node)}", _r(c), conflicts, phases, offset))

    def route(self, rid, node, entry_side, exits):
        """Route entering `node` from `entry_side`, then leaving through `exits` in turn."""
        lanes = [self.in_lane(node, entry_side)]
        side_in = entry_side
        for k, s_out in enumerate(exits):
            lanes.append(f"x_{self._nid(node)}_{side_in}{s_out}")
            lanes.append(self.out_lane(node, s_out))
            nb = self.neighbor(node, s_out)
            if k < len(exits) - 1:
                if nb is None:
                    raise ValueError(f"route {rid} leaves the grid early")
                node, side_in = nb, _OPPOSITE[s_out]
        return Route(rid, lanes)


def straight_road(length=200.0, speed_limit=12.0, spawns=None) -> ScenarioFile:
    lane = Lane("l0", [[0.0, 0.0], [length, 0.0]], 3.5, speed_limit)
    if spawns is None:
        spawns = [SpawnEvent(0.0, "r0", 8.0)]
    return ScenarioFile("straight", [lane], [Route("r0", ["l0"])], [], list(spawns))




def _turn_name(s_in, s_out):
    d = -np.array(_DIRS[s_in])
    d2 = np.array(_DIRS[s_out])
    cross = d[0] * d2[1] - d[1] * d2[0]
    if abs(cross) < 1e-9:
        return "straight"
    return "left" if cross > 0 else "right"


def intersection(spawns=None, green=20.0, clearance=3.0) -> ScenarioFile:
    """Single signalised 4-way junction with permissive left turns.

    Routes are named `<entry side>_<turn>`, e.g. `W_left`.
    """
    g = _GridBuilder(1, 1, green=green, clearance=clearance)
    routes = []
    for s_in in ("W", "E", "S", "N"):
        for s_out in _DIRS:
            if s_out == s_in:
                continue
            routes.append(g.route(f"{s_in}_{_turn_name(s_in, s_out)}", (0, 0), s_in, [s_out]))
    if spawns is None:
        spawns = default_intersection_spawns()
    return ScenarioFile("intersection", list(g.lanes.values()), routes, g.junctions, list(spawns))


def default_intersection_spawns() -> list:
    """Eight agents: permissive left turns meet opposing through traffic, and
    the cross street arrives while its signal is red."""
    return [
        SpawnEvent(0.0, "W_left", 9.0),
        SpawnEvent(0.0, "E_straight", 10.0),
        SpawnEvent(0.0, "S_straight", 10.0),
        SpawnEvent(1.5, "E_left", 9.0),
        SpawnEvent(1.5, "W_straight", 10.0),
        SpawnEvent(1.5, "N_straight", 10.0),
        SpawnEvent(3.0, "N_left", 9.0),
        SpawnEvent(3.0, "S_right", 9.0),
    ]


def grid2x2(spawns=None) -> ScenarioFile:
    g = _GridBuilder(2, 2)
    routes = [
        g.route("W0_through", (0, 0), "W", ["E", "E"]),
        g.route("E1_through", (1, 1), "E", ["W", "W"]),
        g.route("S0_north", (0, 0), "S", ["N", "N"]),
        g.route("N1_south", (1, 1), "N", ["S", "S"]),
        g.route("W0_zigzag", (0, 0), "W", ["E", "N", "E"]),
        g.route("S1_left", (1, 0), "S", ["W", "N", "N"]),
    ]
    if spawns is None:
        spawns = [
            SpawnEvent(0.0, "W0_through", 9.0),
            SpawnEvent(0.0, "S0_north", 9.0),
            SpawnEvent(2.0, "E1_through", 9.0),
            SpawnEvent(2.0, "N1_south", 9.0),
            SpawnEvent(4.0, "W0_zigzag", 9.0),
            SpawnEvent(4.0, "S1_left", 9.0),
        ]
    return ScenarioFile("grid2x2", list(g.lanes.values()), routes, g.junctions, list(spawns))


BUILTIN = {"straight": straight_road, "intersection": intersection, "grid2x2": grid2x2}
