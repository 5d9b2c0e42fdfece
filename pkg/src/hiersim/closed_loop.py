"""Receding-horizon closed-loop execution, episodes and hybrid co-training."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .commands import Command, Maneuver
from .context import scene_context
from .errors import OffMapError, TrainingDivergenceError
from .expert import ExpertConfig, drift_gates, expert_control, expert_rollout
from .metrics import MetricsAccumulator, MetricsReport, flagged_pairs
from .policy import HighPolicyParams, episode_return, make_ordering, rewards_to_go, reinforce_update, sample_commands
from .realizer import (
    Adam,
    LowSample,
    RealizerParams,
    batch_loss_and_grad,
    make_sample,
    realize,
    rollout_positions,
)
from .records import StepRecord
from .scenario import ScenarioFile
from .scene import (
    DT,
    AgentState,
    Control,
    ControlBounds,
    SceneHistory,
    SceneState,
    collision_pairs,
    integrate_bicycle,
)

log = logging.getLogger(__name__)

CONTROLLERS = ("realizer", "expert", "bangbang")
MAINTAIN_PRIOR = 3.0  # initial logit bonus of Maintain in the command policy


@dataclass(frozen=True)
class RewardWeights:
    progress: float = 1.0
    collision: float = 10.0
    accel: float = 0.1
    ttc: float = 1.0


@dataclass(frozen=True)
class EpisodeConfig:
    dt: float = DT
    t_f: int = 8
    t_h: int = 10
    max_steps: int = 600
    seed: int = 0
    gamma: float = 0.95
    spawns: Optional[tuple] = None  # overrides the scenario's spawn schedule
    spawn_jitter: float = 0.0  # uniform delay added to each spawn time [s]
    spawn_clearance: float = 8.0
    world_margin: float = 20.0  # agents leaving the network's box grown by this are removed
    hold_k: int = 1
    freeze_ordering: bool = False  # keep each agent's decision rank from its first step
    passive: bool = False
    controller: str = "realizer"
    bangbang_deadband: float = 0.2
    ade_stride: int = 5  # 0 disables ADE
    rewards: RewardWeights = field(default_factory=RewardWeights)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    bounds: ControlBounds = field(default_factory=ControlBounds)

    def __post_init__(self):
        if self.t_f < 1 or self.t_h < 1:
            raise ValueError("t_f and t_h must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.hold_k < 1:
            raise ValueError("hold_k must be >= 1")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")


@dataclass
class TrainingHooks:
    """Extra behaviour while collecting co-training rollouts."""

    expert_prob: float = 0.0  # chance of executing the expert on any agent-step
    sample_stride: int = 4
    intent_dropout: float = 0.25
    rng: Optional[np.random.Generator] = None
    samples: list = field(default_factory=list)
    decisions: list = field(default_factory=list)  # (Decision, step index)


def execute_controls(agents: Sequence[AgentState], controls: Sequence[Control], dt: float) -> list:
    """The only place where controls reach the vehicle dynamics."""
    return [integrate_bicycle(a, u, dt) for a, u in zip(agents, controls)]


def _bangbang(u: Control, bounds: ControlBounds, deadband: float) -> Control:
    if u.accel > deadband:
        a = bounds.a_max
    elif u.accel < -deadband:
        a = bounds.a_min
    else:
        a = 0.0
    return Control(a, u.steer)


def _rewards(scene, nxt, controls, w: RewardWeights) -> tuple:
    before = scene_context(scene)
    after = scene_context(nxt)
    hit = set()
    for i, j in collision_pairs(nxt.agents):
        hit.update((i, j))
    flagged = set()
    for i, j in flagged_pairs(nxt.agents):
        flagged.update((i, j))
    out = []
    for k, u in enumerate(controls):
        r = w.progress * (after[k].s - before[k].s)
        r -= w.collision * (k in hit)
        r -= w.accel * abs(u.accel)
        r -= w.ttc * (k in flagged)
        out.append(float(r))
    return tuple(out)


def _safe_gates(scene: SceneState, cfg: ExpertConfig) -> np.ndarray:
    """Drift gates, NaN for agents outside the recovery radius."""
    out = np.empty(len(scene.agents))
    for k, c in enumerate(scene_context(scene)):
        if abs(c.lateral) > cfg.recovery_radius:
            out[k] = np.nan
        elif abs(c.lateral) > cfg.drift_offset or abs(c.heading_error) > cfg.drift_heading:
            out[k] = 1.0
        else:
            out[k] = 0.2
    return out


def _departures(scene: SceneState, cfg: EpisodeConfig) -> tuple[list, list]:
    """Split agents into those staying and departure event tags."""
    keep, events = [], []
    for a, c in zip(scene.agents, scene_context(scene)):
        if not scene.network.contains(a.x, a.y, cfg.world_margin):
            events.append(f"offmap:{a.agent_id}")
        elif c.s >= c.route_length - a.half_length:
            events.append(f"arrive:{a.agent_id}")
        else:
            keep.append(a)
    return keep, events


def step_closed_loop(
    scene: SceneState,
    history: SceneHistory,
    high: HighPolicyParams,
    low: RealizerParams,
    cfg: EpisodeConfig,
    rng,
    commands: Optional[Sequence[Command]] = None,
    hooks: Optional[TrainingHooks] = None,
    ordering: Optional[Sequence[int]] = None,
):
    """Advance the scene by one dt.

    Samples commands (unless `commands` is given), decodes the full T_f-step
    rollout and executes only its first control. Returns
    (next scene, history with the next scene pushed, StepRecord, decisions).
    Departed agents are already removed from the next scene.
    """
    if not history.states or history.last is not scene:
        history = history.push(scene)
    n = len(scene.agents)
    decisions: list = []
    if n == 0:
        nxt = scene.with_agents((), time=round(scene.time + cfg.dt, 9))
        return nxt, history.push(nxt), StepRecord(scene.time, (), ()), decisions
    if commands is None:
        if ordering is None:
            ordering = make_ordering(scene)
        commands, _, decisions = sample_commands(scene, history, high, ordering, rng, return_decisions=True)
    commands = tuple(commands)

    rollout = None
    if cfg.controller == "realizer":
        rollout = realize(history, commands, low, cfg.bounds, cfg.passive, scene)
        first = rollout.controls[:, 0, :]
        controls = [Control(float(first[k, 0]), float(first[k, 1])) for k in range(n)]
    else:
        controls = [expert_control(scene, k, cfg.expert, commands[k]) for k in range(n)]
        if cfg.controller == "bangbang":
            controls = [_bangbang(u, cfg.bounds, cfg.bangbang_deadband) for u in controls]

    events: list = []
    if hooks is not None and cfg.controller == "realizer":
        gates = _safe_gates(scene, cfg.expert)
        for k in range(n):
            if np.isnan(gates[k]):
                continue  # beyond recovery, the expert has no reference
            if gates[k] > 0.5 or hooks.rng.random() < hooks.expert_prob:
                controls[k] = expert_control(scene, k, cfg.expert, commands[k])
                events.append(f"expert:{scene.agents[k].agent_id}")

    moved = execute_controls(scene.agents, controls, cfg.dt)
    raw = scene.with_agents(moved, time=round(scene.time + cfg.dt, 9))
    rewards = _rewards(scene, raw, controls, cfg.rewards)
    keep, departed = _departures(raw, cfg)
    events.extend(departed)
    nxt = raw if len(keep) == len(moved) else raw.with_agents(keep)
    record = StepRecord(
        time=scene.time,
        agents=scene.agents,
        controls=tuple(controls),
        commands=commands,
        rewards=rewards,
        rollout=None if rollout is None else rollout.controls,
        events=tuple(events),
    )
    return nxt, history.push(nxt), record, decisions


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeResult:
    records: list
    rewards: dict  # agent id -> per-step rewards
    report: MetricsReport
    decisions: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    metrics: Optional[MetricsAccumulator] = None

    def __iter__(self):
        return iter((self.records, self.rewards, self.report))

    def returns(self, gamma: float) -> dict:
        return {k: episode_return(r, gamma) for k, r in self.rewards.items()}


def _spawn_schedule(scenario: ScenarioFile, cfg: EpisodeConfig, rng) -> list:
    events = list(cfg.spawns) if cfg.spawns is not None else list(scenario.spawns)
    out = []
    for e in events:
        t = e.time + (rng.random() * cfg.spawn_jitter if cfg.spawn_jitter > 0 else 0.0)
        out.append((t, e))
    out.sort(key=lambda p: p[0])
    return out


def _try_spawn(scene: SceneState, pending: list, next_id: int, scenario: ScenarioFile, cfg: EpisodeConfig):
    agents = list(scene.agents)
    still = []
    events = []
    veh = scenario.vehicle
    for t, e in pending:
        if t > scene.time + 1e-9:
            still.append((t, e))
            continue
        x, y, th = scene.network.route_info[e.route].path.point_at(0.0)
        if any(math.hypot(a.x - x, a.y - y) < cfg.spawn_clearance for a in agents):
            still.append((t, e))
            continue
        agents.append(AgentState(x, y, th, e.speed, veh.wheelbase, veh.half_length, veh.half_width, e.route, next_id))
        events.append(f"spawn:{next_id}")
        next_id += 1
    if events:
        scene = scene.with_agents(agents)
    return scene, still, next_id


def _replace_last(history: SceneHistory, scene: SceneState) -> SceneHistory:
    if history.states and history.states[-1].time == scene.time:
        return SceneHistory(history.capacity, history.dt, history.states[:-1] + (scene,))
    return history.push(scene)


def _ade_terms(scene, rollout, commands, cfg: EpisodeConfig):
    try:
        ref = expert_rollout(scene, rollout.shape[1], cfg.expert, commands, cfg.dt).positions
    except OffMapError:
        return 0.0, 0
    pred = rollout_positions(scene, _RolloutView(rollout), cfg.dt)
    d = np.sqrt(((pred - ref) ** 2).sum(-1))
    return float(d.sum()), int(d.size)


class _RolloutView:
    def __init__(self, controls):
        self.controls = controls

    def control(self, agent, step):
        c = self.controls[agent, step]
        return Control(float(c[0]), float(c[1]))


def run_episode(
    cfg: EpisodeConfig,
    high: HighPolicyParams,
    low: RealizerParams,
    scenario: ScenarioFile,
    episode: int = 0,
    hooks: Optional[TrainingHooks] = None,
    on_record: Optional[Callable[[StepRecord], None]] = None,
) -> EpisodeResult:
    """Run one episode until every agent has left or max_steps is reached."""
    net = scenario.build_network()
    seq = np.random.SeedSequence([cfg.seed, episode])
    policy_rng, spawn_rng, train_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    if hooks is not None:
        hooks.rng = train_rng
    pending = _spawn_schedule(scenario, cfg, spawn_rng)
    scene = SceneState(0.0, (), net)
    history = SceneHistory(cfg.t_h, cfg.dt)
    next_id = 0
    acc = MetricsAccumulator(cfg.dt)
    records: list = []
    rewards: dict = {}
    held: dict = {}
    rank: dict = {}
    decisions: list = []
    samples: list = []

    for step in range(cfg.max_steps):
        scene, pending, next_id = _try_spawn(scene, pending, next_id, scenario, cfg)
        if not scene.agents and not pending:
            break
        history = _replace_last(history, scene)
        ids = [a.agent_id for a in scene.agents]
        commands = None
        if step % cfg.hold_k != 0 and all(i in held for i in ids):
            commands = [held[i] for i in ids]
        ordering = None
        if cfg.freeze_ordering and scene.agents:
            fresh = [k for k in make_ordering(scene) if ids[k] not in rank]
            for k in fresh:
                rank[ids[k]] = len(rank)
            ordering = sorted(range(len(ids)), key=lambda k: rank[ids[k]])
        nxt, history, rec, decs = step_closed_loop(scene, history, high, low, cfg, policy_rng, commands, hooks,
                                                   ordering)
        if decs:
            held = dict(zip(ids, rec.commands))
            decisions.extend((d, step) for d in decs)
        if hooks is not None and scene.agents and step % hooks.sample_stride == 0:
            s = _training_sample(scene, history, rec.commands, low, cfg, hooks)
            if s is not None:
                samples.append(s)
        if rec.rollout is not None and cfg.ade_stride and step % cfg.ade_stride == 0:
            acc.add_ade(*_ade_terms(scene, rec.rollout, rec.commands, cfg))
        for a, r in zip(rec.agents, rec.rewards):
            rewards.setdefault(a.agent_id, []).append((step, r))
        acc.add(rec)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        scene = nxt

    per_agent = {k: [r for _, r in v] for k, v in rewards.items()}
    if hooks is not None:
        # weight each decision by its agent's discounted reward-to-go
        togo = {}
        for k, v in rewards.items():
            g = rewards_to_go([r for _, r in v], cfg.gamma)
            togo[k] = {st: g[m] for m, (st, _) in enumerate(v)}
        for d, st in decisions:
            hooks.decisions.append((d, float(togo[d.agent_id][st])))
        hooks.samples.extend(samples)
    return EpisodeResult(records, per_agent, acc.report(), decisions, samples, acc)


def _training_sample(scene, history, commands, low: RealizerParams, cfg: EpisodeConfig, hooks: TrainingHooks):
    """Expert-rollout target for the current scene, optionally with the intent dropped.

    Scenes that already contain a collision are skipped: no control can undo
    the overlap, so the collision term there only injects noise.
    """
    if collision_pairs(scene.agents):
        return None
    passive = hooks.rng.random() < hooks.intent_dropout
    cmds = [Command(Maneuver.MAINTAIN, c.waypoints) for c in commands] if passive else list(commands)
    try:
        target = expert_rollout(scene, low.dims.t_f, cfg.expert, cmds, cfg.dt)
        gates = drift_gates(scene, cfg.expert)
    except OffMapError:
        return None
    return make_sample(history, cmds, target, low.dims, gates, passive=passive, scene=scene)


def run_episodes(
    cfg: EpisodeConfig,
    high: HighPolicyParams,
    low: RealizerParams,
    scenario: ScenarioFile,
    episodes: Sequence[int],
    workers: int = 1,
) -> list:
    """Independent episodes, returned in the order of `episodes` regardless of workers."""
    if workers <= 1:
        return [run_episode(cfg, high, low, scenario, e) for e in episodes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda e: run_episode(cfg, high, low, scenario, e), episodes))


def evaluate(cfg, high, low, scenario, episodes: int, workers: int = 1) -> MetricsReport:
    acc = MetricsAccumulator(cfg.dt)
    for res in run_episodes(cfg, high, low, scenario, range(episodes), workers):
        acc = acc.merge(res.metrics)
    return acc.report()


# ---------------------------------------------------------------------------
# co-training


@dataclass
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 2
    low_steps: int = 60  # realizer gradient steps per epoch
    batch_size: int = 24
    low_lr: float = 1e-3
    buffer_epochs: int = 4
    high_lr: float = 0.05
    high_warmup: int = 5  # epochs of realizer-only training
    high_max_grad_norm: float = 5.0
    expert_prob_start: float = 0.5
    expert_prob_end: float = 0.3
    sample_stride: int = 4
    intent_dropout: float = 0.25
    lambda_s: float = 0.1
    lambda_c: float = 1.0
    heldout_episodes: int = 1
    heldout_stride: int = 10
    seed: int = 0


@dataclass
class TrainingCurves:
    heldout_loss: list = field(default_factory=list)  # index 0 is before any update
    train_loss: list = field(default_factory=list)
    mean_return: list = field(default_factory=list)


def heldout_batch(cfg: EpisodeConfig, scenario: ScenarioFile, dims, tcfg: TrainConfig) -> list:
    """Samples from expert-driven episodes on seeds disjoint from training."""
    ecfg = replace_cfg(cfg, controller="expert", seed=cfg.seed + 7919, ade_stride=0)
    high = HighPolicyParams.init(seed=tcfg.seed + 1, maintain_prior=MAINTAIN_PRIOR)
    dummy = RealizerParams.zeros(dims)
    net = scenario.build_network()
    out = []
    for e in range(tcfg.heldout_episodes):
        res = run_episode(ecfg, high, dummy, scenario, e)
        hooks = TrainingHooks(intent_dropout=tcfg.intent_dropout, rng=np.random.default_rng([tcfg.seed, 99, e]))
        history = SceneHistory(cfg.t_h, cfg.dt)
        for k, rec in enumerate(res.records):
            scene = SceneState(rec.time, rec.agents, net)
            history = history.push(scene)
            if rec.agents and k % tcfg.heldout_stride == 0:
                s = _training_sample(scene, history, rec.commands, dummy, cfg, hooks)
                if s is not None:
                    out.append(s)
    return out


def replace_cfg(cfg: EpisodeConfig, **kw) -> EpisodeConfig:
    from dataclasses import replace

    return replace(cfg, **kw)


def cotrain(
    cfg: EpisodeConfig,
    scenarios: Sequence[ScenarioFile],
    tcfg: TrainConfig = TrainConfig(),
    high: Optional[HighPolicyParams] = None,
    low: Optional[RealizerParams] = None,
    checkpoint_dir: Optional[str | Path] = None,
    heldout: Optional[list] = None,
):
    """Alternate REINFORCE on the command policy with supervised realizer updates.

    Returns (high params, realizer params, TrainingCurves).
    """
    if not scenarios:
        raise ValueError("need at least one scenario")
    high = HighPolicyParams.init(seed=tcfg.seed, maintain_prior=MAINTAIN_PRIOR) if high is None else high
    low = RealizerParams.init(seed=tcfg.seed) if low is None else low
    if heldout is None:
        heldout = heldout_batch(cfg, scenarios[0], low.dims, tcfg)
    curves = TrainingCurves()
    curves.heldout_loss.append(_heldout_loss(heldout, low, tcfg))
    if tcfg.epochs == 0:
        return high, low, curves
    adam = Adam(low.flat.size, lr=tcfg.low_lr)
    rng = np.random.default_rng([tcfg.seed, 1])
    buffer: list = []
    last_good = (high, low)
    for epoch in range(tcfg.epochs):
        try:
            high, low = _epoch(cfg, scenarios, tcfg, high, low, adam, rng, buffer, heldout, epoch, curves)
        except TrainingDivergenceError:
            # also covers non-finite gradients raised inside the realizer and policy updates
            _write_last_good(checkpoint_dir, *last_good)
            raise
        last_good = (high, low)
        log.info("epoch %d: heldout %.4f train %.4f return %.2f", epoch, curves.heldout_loss[-1],
                 curves.train_loss[-1], curves.mean_return[-1])
    if checkpoint_dir is not None:
        _write_last_good(checkpoint_dir, high, low)
    return high, low, curves


def _epoch(cfg, scenarios, tcfg, high, low, adam, rng, buffer, heldout, epoch, curves):
    """Rollouts, one policy update and a wave of realizer steps; `buffer` is updated in place."""
    frac = epoch / max(tcfg.epochs - 1, 1)
    hooks = TrainingHooks(
        expert_prob=tcfg.expert_prob_start + (tcfg.expert_prob_end - tcfg.expert_prob_start) * frac,
        sample_stride=tcfg.sample_stride,
        intent_dropout=tcfg.intent_dropout,
    )
    returns = []
    for k in range(tcfg.episodes_per_epoch):
        scenario = scenarios[(epoch * tcfg.episodes_per_epoch + k) % len(scenarios)]
        ecfg = replace_cfg(cfg, seed=tcfg.seed * 100003 + epoch, ade_stride=0)
        res = run_episode(ecfg, high, low, scenario, k, hooks=hooks)
        returns.extend(res.returns(cfg.gamma).values())
    curves.mean_return.append(float(np.mean(returns)) if returns else 0.0)

    if epoch >= tcfg.high_warmup and hooks.decisions:
        high = reinforce_update(high, hooks.decisions, tcfg.high_lr, tcfg.high_max_grad_norm)

    buffer.append(hooks.samples)
    del buffer[:-tcfg.buffer_epochs]
    pool = [s for chunk in buffer for s in chunk]
    losses = []
    for _ in range(tcfg.low_steps if pool else 0):
        idx = rng.choice(len(pool), size=min(tcfg.batch_size, len(pool)), replace=False)
        loss, grad = batch_loss_and_grad([pool[i] for i in idx], low, tcfg.lambda_s, tcfg.lambda_c, cfg.bounds)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergenceError(f"non-finite realizer loss at epoch {epoch}")
        low = adam.step(low, grad)
        losses.append(loss)
    curves.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
    h = _heldout_loss(heldout, low, tcfg)
    if not math.isfinite(h):
        raise TrainingDivergenceError(f"non-finite held-out loss at epoch {epoch}")
    curves.heldout_loss.append(h)
    return high, low


def _heldout_loss(samples: Sequence[LowSample], low: RealizerParams, tcfg: TrainConfig) -> float:
    if not samples:
        return float("nan")
    return batch_loss_and_grad(samples, low, tcfg.lambda_s, tcfg.lambda_c, need_grad=False)[0]


def _write_last_good(checkpoint_dir, high, low) -> None:
    if checkpoint_dir is None:
        return
    from .io import save_checkpoint

    d = Path(checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "high.ckpt", high)
    save_checkpoint(d / "low.ckpt", low)
