"""Hierarchical multi-agent traffic simulation: a command policy over a learned control realizer."""

from .closed_loop import EpisodeConfig, TrainConfig, cotrain, evaluate, run_episode, step_closed_loop
from .commands import Command, Maneuver
from .metrics import MetricsReport, accumulate, compute_ade, compute_ttc
from .policy import HighPolicyParams, PolicyDims, sample_commands
from .realizer import RealizerDims, RealizerParams, loss_low, realize
from .scenario import ScenarioFile, grid2x2, intersection, straight_road
from .scene import AgentState, Control, SceneHistory, SceneState, integrate_bicycle

__version__ = "0.1.0"

__all__ = [
    "AgentState", "Command", "Control", "EpisodeConfig", "HighPolicyParams", "Maneuver",
    "MetricsReport", "PolicyDims", "RealizerDims", "RealizerParams", "ScenarioFile",
    "SceneHistory", "SceneState", "TrainConfig", "accumulate", "compute_ade", "compute_ttc",
    "cotrain", "evaluate", "grid2x2", "integrate_bicycle", "intersection", "loss_low",
    "realize", "run_episode", "sample_commands", "step_closed_loop", "straight_road",
]
