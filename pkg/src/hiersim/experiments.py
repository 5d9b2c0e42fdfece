"""Shared protocol for the intersection co-training and controller comparison runs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

from .closed_loop import EpisodeConfig, TrainConfig, TrainingCurves, cotrain, evaluate
from .metrics import MetricsReport
from .policy import HighPolicyParams
from .realizer import RealizerParams
from .scenario import intersection

TRAIN_EPISODE = EpisodeConfig(spawn_jitter=1.0)
EVAL_EPISODE = EpisodeConfig(spawn_jitter=1.0, seed=12345, ade_stride=0)
EVAL_EPISODES = 20
VARIANTS = ("trained", "passive", "untrained", "bangbang", "expert")


@dataclass
class TrainedPair:
    high: HighPolicyParams
    low: RealizerParams
    curves: TrainingCurves
    seconds: float

    @property
    def heldout_drop(self) -> float:
        h = self.curves.heldout_loss
        return 1.0 - h[-1] / h[0]


def train_intersection(tcfg: TrainConfig = TrainConfig(), checkpoint_dir=None) -> TrainedPair:
    t = time.perf_counter()
    high, low, curves = cotrain(TRAIN_EPISODE, [intersection()], tcfg, checkpoint_dir=checkpoint_dir)
    return TrainedPair(high, low, curves, time.perf_counter() - t)


def evaluate_variant(name: str, pair: TrainedPair, episodes: int = EVAL_EPISODES,
                     cfg: EpisodeConfig = EVAL_EPISODE, seed: int = 0) -> MetricsReport:
    """One row of the comparison. `untrained` keeps the trained command policy
    and swaps in a freshly initialised realizer; `bangbang` and `expert` execute
    the trained policy's commands with the rule-based controllers."""
    high, low = pair.high, pair.low
    if name == "passive":
        cfg = replace(cfg, passive=True)
    elif name == "untrained":
        low = RealizerParams.init(low.dims, seed=seed)
    elif name in ("bangbang", "expert"):
        cfg = replace(cfg, controller=name)
    elif name != "trained":
        raise ValueError(f"unknown variant {name!r}")
    return evaluate(cfg, high, low, intersection(), episodes)


@dataclass
class Comparison:
    reports: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"{'variant':<10} {'coll/km':>8} {'flags/km':>9} {'hardacc/km':>11} {'turn/km':>8} "
                 f"{'km':>6} {'v[m/s]':>7} {'sec':>6}"]
        for name, r in self.reports.items():
            lines.append(f"{name:<10} {r.collision_per_km:8.3f} {r.safety_flag_per_km:9.3f} "
                         f"{r.hard_accel_per_km:11.2f} {r.sharp_turn_per_km:8.2f} {r.total_distance:6.2f} "
                         f"{r.avg_speed:7.2f} {self.seconds[name]:6.1f}")
        return "\n".join(lines) + "\n"


def compare(pair: TrainedPair, variants=VARIANTS, episodes: int = EVAL_EPISODES,
            on_row: Optional[callable] = None) -> Comparison:
    out = Comparison()
    for name in variants:
        t = time.perf_counter()
        out.reports[name] = evaluate_variant(name, pair, episodes)
        out.seconds[name] = time.perf_counter() - t
        if on_row is not None:
            on_row(name, out.reports[name])
    return out
