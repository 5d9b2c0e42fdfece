"""Ordered (leader-follower) command policy and its REINFORCE trainer.

Agents decide in an ordering H. Agent h_i sees the scene plus the commands
already emitted by h_1..h_{i-1}, so the joint command distribution is the
product of the per-agent conditionals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .commands import N_MANEUVERS, Command, Maneuver
from .context import scene_context
from .errors import ArityError, TrainingDivergenceError
from .params import ParamLayout
from .scene import SceneHistory, SceneState

OWN_FEATURES = 8
NEIGHBOR_FEATURES = 5
COMPETITOR_FEATURES = 4
SLOT_FEATURES = N_MANEUVERS + 3


@dataclass(frozen=True)
class PolicyDims:
    n_max: int = 8
    k_neighbors: int = 3
    hidden: int = 32
    n_waypoints: int = 4
    waypoint_spacing: float = 5.0
    max_offset: float = 1.0

    @property
    def scene_dim(self) -> int:
        return OWN_FEATURES + NEIGHBOR_FEATURES * self.k_neighbors + COMPETITOR_FEATURES

    @property
    def feature_dim(self) -> int:
        return self.scene_dim + (self.n_max - 1) * SLOT_FEATURES + N_MANEUVERS

    def layout(self) -> ParamLayout:
        return ParamLayout(
            {
                "W1": (self.feature_dim, self.hidden),
                "b1": (self.hidden,),
                "W2": (self.hidden, N_MANEUVERS),
                "b2": (N_MANEUVERS,),
                "w_off": (self.hidden,),
                "b_off": (1,),
            }
        )


@dataclass
class HighPolicyParams:
    flat: np.ndarray
    dims: PolicyDims = field(default_factory=PolicyDims)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        self.layout = self.dims.layout()
        if self.flat.shape != (self.layout.size,):
            raise ValueError("parameter vector does not match PolicyDims")

    def view(self) -> dict:
        return self.layout.views(self.flat)

    @classmethod
    def zeros(cls, dims: PolicyDims = PolicyDims()) -> "HighPolicyParams":
        return cls(dims.layout().zeros(), dims)

    @classmethod
    def init(cls, dims: PolicyDims = PolicyDims(), seed: int = 0, maintain_prior: float = 0.0, scale: float = 0.5):
        rng = np.random.default_rng(seed)
        p = cls(dims.layout().init(rng, scale, zero=("w_off",)), dims)
        p.view()["b2"][Maneuver.MAINTAIN] = maintain_prior
        return p

    def copy(self) -> "HighPolicyParams":
        return HighPolicyParams(self.flat.copy(), self.dims)


@dataclass(frozen=True)
class SubgameState:
    scene_features: np.ndarray  # (scene_dim,)
    command_slots: np.ndarray  # (n_max - 1, SLOT_FEATURES)
    pooled: np.ndarray  # (N_MANEUVERS,)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.scene_features, self.command_slots.ravel(), self.pooled])


@dataclass(frozen=True)
class Decision:
    """One sampled maneuver with the features it was conditioned on."""

    features: np.ndarray
    action: int
    agent_id: int


# ---------------------------------------------------------------------------
# ordering and featurisation


def make_ordering(scene: SceneState) -> list[int]:
    """Agents by ascending distance to their next conflict point, ties by index."""
    ctx = scene_context(scene)
    return sorted(range(len(scene.agents)), key=lambda k: (ctx[k].conflict_dist, k))


def _ego(agent, dx, dy):
    c, s = math.cos(agent.heading), math.sin(agent.heading)
    return c * dx + s * dy, -s * dx + c * dy


def _clip1(v):
    return min(v, 1.0)


def scene_features(scene: SceneState, history: SceneHistory | None, i: int, dims: PolicyDims) -> np.ndarray:
    agents = scene.agents
    ctx = scene_context(scene)
    me, c = agents[i], ctx[i]
    accel = 0.0
    if history is not None and len(history) > 1:
        first = history.states[0]
        for a in first.agents:
            if a.agent_id == me.agent_id:
                accel = (me.speed - a.speed) / max(scene.time - first.time, 1e-9)
                break
    own = [
        me.speed / 10.0,
        c.lateral / 2.0,
        c.heading_error,
        _clip1(c.conflict_dist / 50.0),
        _clip1(c.stop_dist / 50.0),
        1.0 if c.stop_red else 0.0,
        _clip1((c.route_length - c.s) / 100.0),
        accel / 3.0,
    ]
    vx, vy = me.speed * math.cos(me.heading), me.speed * math.sin(me.heading)
    others = []
    for j, o in enumerate(agents):
        if j == i:
            continue
        dx, dy = o.x - me.x, o.y - me.y
        ex, ey = _ego(me, dx, dy)
        ovx, ovy = o.speed * math.cos(o.heading) - vx, o.speed * math.sin(o.heading) - vy
        evx, evy = _ego(me, ovx, ovy)
        others.append((dx * dx + dy * dy, ex, ey, evx, evy))
    others.sort()
    neigh = np.zeros((dims.k_neighbors, NEIGHBOR_FEATURES))
    for k, (_, ex, ey, evx, evy) in enumerate(others[: dims.k_neighbors]):
        neigh[k] = (ex / 20.0, ey / 20.0, evx / 10.0, evy / 10.0, 1.0)
    comp = np.zeros(COMPETITOR_FEATURES)
    best = math.inf
    for j, o in enumerate(agents):
        if j == i:
            continue
        shared = c.upcoming & ctx[j].upcoming
        if not shared:
            continue
        their = min(ctx[j].upcoming_dist[k] for k in shared)
        mine = min(c.upcoming_dist[k] for k in shared)
        t_their = their / max(o.speed, 0.5)
        if t_their < best:
            best = t_their
            comp[:] = (their / 50.0, mine / 50.0, o.speed / 10.0, 1.0)
    return np.concatenate([own, neigh.ravel(), comp])


def _slot(scene, i, j, cmd: Command) -> np.ndarray:
    me, o = scene.agents[i], scene.agents[j]
    ctx = scene_context(scene)
    ex, ey = _ego(me, o.x - me.x, o.y - me.y)
    out = np.zeros(SLOT_FEATURES)
    out[int(cmd.maneuver)] = 1.0
    out[N_MANEUVERS] = ex / 20.0
    out[N_MANEUVERS + 1] = ey / 20.0
    out[N_MANEUVERS + 2] = 1.0 if ctx[i].upcoming & ctx[j].upcoming else 0.0
    return out


def build_subgame_state(
    scene: SceneState,
    history: SceneHistory | None,
    ordering: Sequence[int],
    preceding: Sequence[Command],
    i: int,
    dims: PolicyDims = PolicyDims(),
) -> SubgameState:
    """Sub-game state of the i-th agent in `ordering` (1-based position i).

    `preceding` holds the commands of ordering[0..i-2], in decision order.
    """
    if len(preceding) != i - 1:
        raise ArityError(f"agent at position {i} needs {i - 1} preceding commands, got {len(preceding)}")
    if len(scene.agents) > dims.n_max:
        raise ArityError(f"{len(scene.agents)} agents exceed n_max = {dims.n_max}")
    me = ordering[i - 1]
    slots = np.zeros((dims.n_max - 1, SLOT_FEATURES))
    pooled = np.zeros(N_MANEUVERS)
    for k, cmd in enumerate(preceding):
        slots[k] = _slot(scene, me, ordering[k], cmd)
        pooled += slots[k, :N_MANEUVERS] * slots[k, N_MANEUVERS + 2]
    return SubgameState(scene_features(scene, history, me, dims), slots, pooled)


# ---------------------------------------------------------------------------
# the scoring network


def _forward(params: HighPolicyParams, phi: np.ndarray):
    v = params.view()
    h = np.tanh(phi @ v["W1"] + v["b1"])
    logits = h @ v["W2"] + v["b2"]
    return h, logits


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    zz = z - m
    return zz - np.log(np.exp(zz).sum(axis=-1, keepdims=True))


def maneuver_log_probs(params: HighPolicyParams, phi: np.ndarray) -> np.ndarray:
    return log_softmax(_forward(params, phi)[1])


def waypoint_offset(params: HighPolicyParams, phi: np.ndarray) -> float:
    v = params.view()
    h, _ = _forward(params, phi)
    return float(params.dims.max_offset * np.tanh(h @ v["w_off"] + v["b_off"][0]))


def command_waypoints(scene: SceneState, i: int, maneuver: Maneuver, offset: float, dims: PolicyDims) -> tuple:
    """K points ahead along the commanded lane, shifted by the learned offset."""
    a = scene.agents[i]
    ctx = scene_context(scene)[i]
    path = scene.network.route_info[a.route_id].path
    lane_shift = {Maneuver.SWITCH_LEFT: ctx.lane_width, Maneuver.SWITCH_RIGHT: -ctx.lane_width}.get(maneuver, 0.0)
    pts = []
    for k in range(1, dims.n_waypoints + 1):
        x, y, th = path.point_at(ctx.s + k * dims.waypoint_spacing)
        d = lane_shift + offset
        pts.append((x - math.sin(th) * d, y + math.cos(th) * d))
    return tuple(pts)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_commands(
    scene: SceneState,
    history: SceneHistory | None,
    params: HighPolicyParams,
    ordering: Sequence[int],
    rng,
    return_decisions: bool = False,
):
    """Sample one command per agent, autoregressively along `ordering`.

    Returns (commands, log_probs) indexed by agent position in the scene, plus
    the list of Decisions in decision order when `return_decisions` is set.
    """
    rng = _as_rng(rng)
    dims = params.dims
    n = len(scene.agents)
    commands: list = [None] * n
    logps = [0.0] * n
    decisions = []
    preceding: list[Command] = []
    for pos, agent in enumerate(ordering, start=1):
        phi = build_subgame_state(scene, history, ordering, preceding, pos, dims).vector()
        h, logits = _forward(params, phi)
        lp = log_softmax(logits)
        p = np.exp(lp)
        u = rng.random()
        a = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
        a = min(a, N_MANEUVERS - 1)
        v = params.view()
        offset = float(dims.max_offset * np.tanh(h @ v["w_off"] + v["b_off"][0]))
        m = Maneuver(a)
        cmd = Command(m, command_waypoints(scene, agent, m, offset, dims))
        commands[agent] = cmd
        logps[agent] = float(lp[a])
        preceding.append(cmd)
        if return_decisions:
            decisions.append(Decision(phi, a, scene.agents[agent].agent_id))
    if return_decisions:
        return commands, logps, decisions
    return commands, logps


def conditional_distribution(scene, history, params, ordering, preceding, pos) -> np.ndarray:
    """Maneuver probabilities of the agent at (1-based) position `pos`."""
    phi = build_subgame_state(scene, history, ordering, preceding, pos, params.dims).vector()
    return np.exp(maneuver_log_probs(params, phi))


def joint_log_prob(scene, history, params: HighPolicyParams, ordering, commands: Sequence[Command]) -> float:
    """Sum of per-agent conditional maneuver log-probs along the ordering."""
    if len(commands) != len(scene.agents):
        raise ArityError("need one command per agent")
    total = 0.0
    preceding: list[Command] = []
    for pos, agent in enumerate(ordering, start=1):
        phi = build_subgame_state(scene, history, ordering, preceding, pos, params.dims).vector()
        total += float(maneuver_log_probs(params, phi)[int(commands[agent].maneuver)])
        preceding.append(commands[agent])
    return total


# ---------------------------------------------------------------------------
# training


def episode_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


def rewards_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def log_prob_grad(params: HighPolicyParams, phi: np.ndarray, actions, weights=None) -> np.ndarray:
    """Gradient of sum_b w_b * log pi(a_b | phi_b) with respect to the flat parameters.

    `phi` may be a single feature vector or a (B, F) batch.
    """
    phi = np.atleast_2d(phi)
    actions = np.atleast_1d(np.asarray(actions, dtype=int))
    w = np.ones(len(actions)) if weights is None else np.asarray(weights, dtype=float)
    v = params.view()
    h = np.tanh(phi @ v["W1"] + v["b1"])
    logits = h @ v["W2"] + v["b2"]
    p = np.exp(log_softmax(logits))
    gz = -p
    gz[np.arange(len(actions)), actions] += 1.0
    gz *= w[:, None]
    grad = params.layout.zeros()
    g = params.layout.views(grad)
    g["W2"][...] = h.T @ gz
    g["b2"][...] = gz.sum(axis=0)
    gpre = (gz @ v["W2"].T) * (1.0 - h * h)
    g["W1"][...] = phi.T @ gpre
    g["b1"][...] = gpre.sum(axis=0)
    return grad


def reinforce_update(
    params: HighPolicyParams,
    batch: Sequence[tuple[Decision, float]],
    step_size: float,
    max_grad_norm: float | None = None,
) -> HighPolicyParams:
    """One REINFORCE ascent step with a mean-return baseline."""
    if not batch:
        raise ValueError("empty batch")
    phi = np.stack([d.features for d, _ in batch])
    actions = np.array([d.action for d, _ in batch])
    returns = np.array([g for _, g in batch], dtype=float)
    adv = returns - returns.mean()
    grad = log_prob_grad(params, phi, actions, adv) / len(batch)
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError("non-finite policy gradient")
    if max_grad_norm is not None:
        norm = float(np.linalg.norm(grad))
        if norm > max_grad_norm:
            grad *= max_grad_norm / norm
    return HighPolicyParams(params.flat + step_size * grad, params.dims)
