"""Per-step trajectory log rows produced by the closed-loop engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class StepRecord:
    """Everything that happened to the live agents during [time, time + dt).

    `agents` are the pre-step states; `controls[k]` is the control executed
    by `agents[k]` over the step.
    """

    time: float
    agents: tuple
    controls: tuple
    commands: tuple = ()
    rewards: tuple = ()
    rollout: Optional[np.ndarray] = None  # (N, T_f, 2) predicted controls
    events: tuple = ()  # free-form per-step event tags

    def __eq__(self, other):
        if not isinstance(other, StepRecord):
            return NotImplemented
        same_rollout = (self.rollout is None and other.rollout is None) or (
            self.rollout is not None
            and other.rollout is not None
            and np.array_equal(self.rollout, other.rollout)
        )
        return (
            self.time == other.time
            and self.agents == other.agents
            and self.controls == other.controls
            and self.commands == other.commands
            and self.rewards == other.rewards
            and self.events == other.events
            and same_rollout
        )

    __hash__ = None
