"""The command interface between the strategic policy and the motion realizer."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Maneuver(enum.IntEnum):
    MAINTAIN = 0
    YIELD = 1
    SWITCH_LEFT = 2
    SWITCH_RIGHT = 3
    STOP = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, s: str) -> "Maneuver":
        return cls[s.upper()]


N_MANEUVERS = len(Maneuver)


@dataclass(frozen=True)
class Command:
    maneuver: Maneuver
    waypoints: tuple = ()  # K (x, y) points in world coordinates

    def waypoint_array(self) -> np.ndarray:
        return np.asarray(self.waypoints, dtype=float).reshape(-1, 2)


MAINTAIN = Command(Maneuver.MAINTAIN)
