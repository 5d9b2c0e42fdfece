"""Command-conditioned motion realizer.

Scene encoder (per-step history projection, attention pooling over time,
map-feature projection, agent-to-agent attention), intention encoder,
decoder (cross-attention to the scene latent, self-attention across agents,
residual MLP, linear control head), the differentiable bicycle rollout,
training losses and their analytic gradients.

Weights are stored as one flat float64 vector so gradients can be checked
coordinate by coordinate against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .commands import N_MANEUVERS, Command
from .context import scene_context
from .errors import InvalidStateError, ShapeError, TrainingDivergenceError
from .expert import ExpertConfig, RecoveryTarget, RouteFrame, find_leader
from .params import ParamLayout
from .scene import (
    DT,
    AgentState,
    Control,
    ControlBounds,
    SceneHistory,
    SceneState,
    disc_radius,
    integrate_bicycle,
    wrap_angle,
    wrap_angles,
)

D_X = 6  # per-step history features
D_M = 15  # map / route features
D_R = 9  # pairwise relative features
COLL_MARGIN = 0.5
_LEADER_CFG = ExpertConfig()


@dataclass(frozen=True)
class RealizerDims:
    d_z: int = 32
    d_c: int = 16
    t_h: int = 10
    t_f: int = 8
    n_waypoints: int = 4

    def layout(self) -> ParamLayout:
        dz, dc = self.d_z, self.d_c
        shapes = {
            "Wh": (D_X, dz),
            "bh": (dz,),
            "q_t": (dz,),
            "Wm": (D_M, dz),
            "bm": (dz,),
        }
        for blk in ("a", "x", "s"):
            shapes.update(
                {
                    f"{blk}_Wq": (dz, dz),
                    f"{blk}_Wk": (dz, dz),
                    f"{blk}_Wv": (dz, dz),
                    f"{blk}_Wrk": (D_R, dz),
                    f"{blk}_Wrv": (D_R, dz),
                    f"{blk}_Wo": (dz, dz),
                }
            )
            if blk == "a":
                shapes.update({"E_man": (N_MANEUVERS, dc), "W_wp": (2 * self.n_waypoints, dc), "Wc": (dc, dz)})
        shapes.update(
            {
                "W1": (dz, dz),
                "b1": (dz,),
                "W2": (dz, dz),
                "b2": (dz,),
                "Wout": (dz, 2 * self.t_f),
                "bout": (2 * self.t_f,),
            }
        )
        return ParamLayout(shapes)


INTENT_KEYS = ("E_man", "W_wp")


@dataclass
class RealizerParams:
    flat: np.ndarray
    dims: RealizerDims = field(default_factory=RealizerDims)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float)
        self.layout = self.dims.layout()
        if self.flat.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} realizer parameters, got {self.flat.shape}")

    def view(self) -> dict:
        return self.layout.views(self.flat)

    @classmethod
    def init(cls, dims: RealizerDims = RealizerDims(), seed: int = 0, scale: float = 0.5, head_scale: float = 0.3):
        rng = np.random.default_rng(seed)
        layout = dims.layout()
        flat = layout.init(rng, scale, zero=("Wout",))
        v = layout.views(flat)
        v["q_t"][...] = rng.normal(0.0, scale / math.sqrt(dims.d_z), dims.d_z)
        v["Wout"][...] = rng.normal(0.0, head_scale / math.sqrt(dims.d_z), v["Wout"].shape)
        return cls(flat, dims)

    @classmethod
    def zeros(cls, dims: RealizerDims = RealizerDims()):
        return cls(dims.layout().zeros(), dims)

    def copy(self) -> "RealizerParams":
        return RealizerParams(self.flat.copy(), self.dims)

    def with_zero_intent(self) -> "RealizerParams":
        p = self.copy()
        v = p.view()
        for k in INTENT_KEYS:
            v[k][...] = 0.0
        return p


# ---------------------------------------------------------------------------
# featurisation


@dataclass
class SceneFeatures:
    X: np.ndarray  # (N, T_h, D_X)
    mask: np.ndarray  # (N, T_h) bool
    M: np.ndarray  # (N, D_M)
    R: np.ndarray  # (N, N, D_R)


def _ego(heading, dx, dy):
    c, s = math.cos(heading), math.sin(heading)
    return c * dx + s * dy, -s * dx + c * dy


def _history_features(history: SceneHistory, t_h: int, scene: SceneState):
    n = len(scene.agents)
    X = np.zeros((n, t_h, D_X))
    mask = np.zeros((n, t_h), dtype=bool)
    states = history.states[-t_h:] if history is not None and len(history) else (scene,)
    if states[-1] is not scene and states[-1].time != scene.time:
        states = tuple(states) + (scene,)
        states = states[-t_h:]
    lookup = [{a.agent_id: a for a in s.agents} for s in states]
    offset = t_h - len(states)
    for i, me in enumerate(scene.agents):
        for k, table in enumerate(lookup):
            a = table.get(me.agent_id)
            if a is None:
                continue
            ex, ey = _ego(me.heading, a.x - me.x, a.y - me.y)
            dth = a.heading - me.heading
            X[i, offset + k] = (ex / 10.0, ey / 10.0, math.cos(dth), math.sin(dth), a.speed / 10.0, 1.0)
            mask[i, offset + k] = True
    return X, mask


def _map_features(scene: SceneState) -> np.ndarray:
    ctx = scene_context(scene)
    net = scene.network
    M = np.zeros((len(scene.agents), D_M))
    for i, (a, c) in enumerate(zip(scene.agents, ctx)):
        path = net.route_info[a.route_id].path
        ahead = [wrap_angle(path.heading_at(c.s + d) - c.path_heading) for d in (5.0, 10.0, 20.0)]
        lead = find_leader(scene, i, RouteFrame(c.s, c.lateral, c.heading_error, c.path_heading), _LEADER_CFG)
        M[i] = (
            a.speed / 10.0,
            c.lateral / 2.0,
            c.heading_error,
            ahead[0],
            ahead[1],
            ahead[2],
            min(c.stop_dist / 50.0, 1.0),
            1.0 if (c.stop_red and c.stop_dist < 50.0) else 0.0,
            min(c.conflict_dist / 50.0, 1.0),
            c.speed_limit / 15.0,
            min((c.route_length - c.s) / 50.0, 1.0),
            min(lead[0] / 50.0, 1.0) if lead else 1.0,
            (a.speed - lead[1]) / 10.0 if lead else 0.0,
            1.0 if lead else 0.0,
            a.speed / c.speed_limit,
        )
    return M


def _relative_features(scene: SceneState) -> np.ndarray:
    agents = scene.agents
    n = len(agents)
    ctx = scene_context(scene)
    net = scene.network
    R = np.zeros((n, n, D_R))
    for i, me in enumerate(agents):
        vx, vy = me.speed * math.cos(me.heading), me.speed * math.sin(me.heading)
        path = net.route_info[me.route_id].path
        half_lane = ctx[i].lane_width / 2.0
        for j, o in enumerate(agents):
            dx, dy = o.x - me.x, o.y - me.y
            ex, ey = _ego(me.heading, dx, dy)
            evx, evy = _ego(me.heading, o.speed * math.cos(o.heading) - vx, o.speed * math.sin(o.heading) - vy)
            dth = o.heading - me.heading
            dist = math.hypot(dx, dy)
            on_path, gap = 0.0, 0.0
            if j != i and dist < 60.0:
                sj, latj, _ = path.project(o.x, o.y)
                ahead = sj - ctx[i].s
                if 0.0 < ahead < 50.0 and abs(latj) <= half_lane + o.half_width:
                    on_path, gap = 1.0, ahead / 50.0
            R[i, j] = (ex / 20.0, ey / 20.0, evx / 10.0, evy / 10.0, math.cos(dth), math.sin(dth),
                       math.exp(-dist / 10.0), on_path, gap)
    return R


def featurize(history: SceneHistory | None, scene: SceneState | None = None, t_h: int = 10) -> SceneFeatures:
    if scene is None:
        scene = history.last
    X, mask = _history_features(history, t_h, scene)
    M = _map_features(scene)
    R = _relative_features(scene)
    if not (np.isfinite(X).all() and np.isfinite(M).all() and np.isfinite(R).all()):
        raise InvalidStateError("non-finite scene features")
    return SceneFeatures(X, mask, M, R)


def intent_inputs(commands: Sequence[Command], agents: Sequence[AgentState], n_waypoints: int):
    """(maneuver indices, ego-frame waypoint offsets flattened to 2K)."""
    idx = np.array([int(c.maneuver) for c in commands], dtype=int)
    wp = np.zeros((len(commands), 2 * n_waypoints))
    for i, (c, a) in enumerate(zip(commands, agents)):
        pts = c.waypoint_array()[:n_waypoints]
        for k, (x, y) in enumerate(pts):
            ex, ey = _ego(a.heading, x - a.x, y - a.y)
            wp[i, 2 * k] = ex / 10.0
            wp[i, 2 * k + 1] = ey / 10.0
    return idx, wp


# ---------------------------------------------------------------------------
# forward / backward building blocks


def _softmax(s, axis=-1):
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def _att_forward(v, blk, qsrc, kvsrc, R):
    dz = qsrc.shape[1]
    scale = 1.0 / math.sqrt(dz)
    Q = qsrc @ v[f"{blk}_Wq"]
    K = (kvsrc @ v[f"{blk}_Wk"])[None, :, :] + R @ v[f"{blk}_Wrk"]
    V = (kvsrc @ v[f"{blk}_Wv"])[None, :, :] + R @ v[f"{blk}_Wrv"]
    S = np.einsum("id,ijd->ij", Q, K) * scale
    A = _softmax(S)
    O = np.einsum("ij,ijd->id", A, V)
    out = O @ v[f"{blk}_Wo"]
    return out, (qsrc, kvsrc, Q, K, V, A, O, scale)


def _att_backward(v, g, blk, cache, gout, R):
    qsrc, kvsrc, Q, K, V, A, O, scale = cache
    g[f"{blk}_Wo"] += O.T @ gout
    gO = gout @ v[f"{blk}_Wo"].T
    gA = np.einsum("id,ijd->ij", gO, V)
    gV = A[:, :, None] * gO[:, None, :]
    gS = A * (gA - (A * gA).sum(axis=1, keepdims=True)) * scale
    gQ = np.einsum("ij,ijd->id", gS, K)
    gK = gS[:, :, None] * Q[:, None, :]
    n, _, dr = R.shape
    Rf = R.reshape(n * n, dr)
    g[f"{blk}_Wrk"] += Rf.T @ gK.reshape(n * n, -1)
    g[f"{blk}_Wrv"] += Rf.T @ gV.reshape(n * n, -1)
    gKj = gK.sum(axis=0)
    gVj = gV.sum(axis=0)
    g[f"{blk}_Wk"] += kvsrc.T @ gKj
    g[f"{blk}_Wv"] += kvsrc.T @ gVj
    g[f"{blk}_Wq"] += qsrc.T @ gQ
    g_qsrc = gQ @ v[f"{blk}_Wq"].T
    g_kv = gKj @ v[f"{blk}_Wk"].T + gVj @ v[f"{blk}_Wv"].T
    return g_qsrc, g_kv


@dataclass
class SceneLatent:
    Z: np.ndarray  # (N, d_z)
    R: np.ndarray  # pairwise relative features the decoder attends with
    cache: tuple = ()

    @property
    def n_agents(self) -> int:
        return self.Z.shape[0]


def _encode(feats: SceneFeatures, v) -> SceneLatent:
    dz = v["Wh"].shape[1]
    A1 = feats.X @ v["Wh"] + v["bh"]
    Hh = np.tanh(A1)
    st = (Hh @ v["q_t"]) / math.sqrt(dz)
    st = np.where(feats.mask, st, -np.inf)
    w = _softmax(st, axis=1)
    P = np.einsum("nt,ntd->nd", w, Hh)
    E0 = P + feats.M @ v["Wm"] + v["bm"]
    att, acache = _att_forward(v, "a", E0, E0, feats.R)
    Z = E0 + att
    return SceneLatent(Z, feats.R, (feats, Hh, w, E0, acache))


def encode_scene(history: SceneHistory, network, params: RealizerParams, scene: SceneState | None = None) -> SceneLatent:
    """Per-agent scene latents from the history window and map context."""
    if history is None or len(history) < 1:
        raise InvalidStateError("history must contain at least one scene")
    feats = featurize(history, scene, params.dims.t_h)
    return _encode(feats, params.view())


def _intent_from_inputs(idx, wp, v) -> np.ndarray:
    return v["E_man"][idx] + wp @ v["W_wp"]


def encode_intent(commands: Sequence[Command], params: RealizerParams, agents: Sequence[AgentState]) -> np.ndarray:
    """Intention embeddings (N, d_c): maneuver-table row plus projected waypoints."""
    idx, wp = intent_inputs(commands, agents, params.dims.n_waypoints)
    return _intent_from_inputs(idx, wp, params.view())


@dataclass(frozen=True)
class ControlRollout:
    controls: np.ndarray  # (N, T_f, 2): [accel, steer]

    @property
    def horizon(self) -> int:
        return self.controls.shape[1]

    def first(self) -> list:
        return [Control(float(a), float(d)) for a, d in self.controls[:, 0]]

    def control(self, agent: int, step: int) -> Control:
        a, d = self.controls[agent, step]
        return Control(float(a), float(d))


def _clamp_raw(U, bounds: ControlBounds):
    raw = U.reshape(U.shape[0], -1, 2)
    lo = np.array([bounds.a_min, -bounds.steer_max])
    hi = np.array([bounds.a_max, bounds.steer_max])
    active = (raw >= lo) & (raw <= hi)
    return np.clip(raw, lo, hi), active


def _decode(latent: SceneLatent, C: np.ndarray, v, bounds: ControlBounds):
    Z, R = latent.Z, latent.R
    if C.shape[0] != Z.shape[0]:
        raise ShapeError("intent and latent slot counts differ")
    D0 = Z + C @ v["Wc"]
    xo, xcache = _att_forward(v, "x", D0, Z, R)
    D1 = D0 + xo
    so, scache = _att_forward(v, "s", D1, D1, R)
    D2 = D1 + so
    F = np.tanh(D2 @ v["W1"] + v["b1"])
    D3 = D2 + F @ v["W2"] + v["b2"]
    # one matmul per step so each step's output does not depend on the horizon length
    W = v["Wout"]
    U = np.concatenate([D3 @ W[:, k:k + 2] for k in range(0, W.shape[1], 2)], axis=-1) + v["bout"]
    controls, active = _clamp_raw(U, bounds)
    return controls, (C, D0, xcache, D1, scache, D2, F, D3, active)


def decode_controls(latent: SceneLatent, intents: np.ndarray, params: RealizerParams,
                    bounds: ControlBounds = ControlBounds()) -> ControlRollout:
    """Clamped (accel, steer) rollout over T_f steps for every agent."""
    C = np.asarray(intents, dtype=float).reshape(latent.n_agents, params.dims.d_c)
    controls, _ = _decode(latent, C, params.view(), bounds)
    return ControlRollout(controls)


def realize(history: SceneHistory, commands: Sequence[Command], params: RealizerParams,
            bounds: ControlBounds = ControlBounds(), passive: bool = False,
            scene: SceneState | None = None) -> ControlRollout:
    scene = history.last if scene is None else scene
    latent = encode_scene(history, scene.network, params, scene)
    if passive:
        C = np.zeros((len(scene.agents), params.dims.d_c))
    else:
        C = encode_intent(commands, params, scene.agents)
    return decode_controls(latent, C, params, bounds)


# ---------------------------------------------------------------------------
# rollout


def rollout_positions(scene: SceneState, rollout: ControlRollout, dt: float = DT) -> np.ndarray:
    """Positions (N, T_f, 2) after each step, by iterating integrate_bicycle."""
    n, tf = rollout.controls.shape[:2]
    out = np.zeros((n, tf, 2))
    for i, a in enumerate(scene.agents):
        s = a
        for t in range(tf):
            s = integrate_bicycle(s, rollout.control(i, t), dt)
            out[i, t] = (s.x, s.y)
    return out


def _rollout_vec(state0: np.ndarray, wheelbase: np.ndarray, controls: np.ndarray, dt: float):
    """Vectorised Euler rollout. state0 is (N, 4): x, y, heading, speed."""
    n, tf, _ = controls.shape
    states = np.zeros((n, tf + 1, 4))
    states[:, 0] = state0
    alive = np.zeros((n, tf), dtype=bool)
    for t in range(tf):
        x, y, th, v = states[:, t].T
        a, d = controls[:, t, 0], controls[:, t, 1]
        states[:, t + 1, 0] = x + v * np.cos(th) * dt
        states[:, t + 1, 1] = y + v * np.sin(th) * dt
        states[:, t + 1, 2] = wrap_angles(th + v * np.tan(d) / wheelbase * dt)
        vn = v + a * dt
        alive[:, t] = vn > 0.0
        states[:, t + 1, 3] = np.maximum(0.0, vn)
    return states, alive


def _rollout_backward(states, alive, wheelbase, controls, gpos, dt):
    """Gradient of the loss w.r.t. controls given dL/d(positions after each step)."""
    n, tf, _ = controls.shape
    gu = np.zeros_like(controls)
    gx = np.zeros(n)
    gy = np.zeros(n)
    gth = np.zeros(n)
    gv = np.zeros(n)
    for t in range(tf - 1, -1, -1):
        gx = gx + gpos[:, t, 0]
        gy = gy + gpos[:, t, 1]
        x, y, th, v = states[:, t].T
        d = controls[:, t, 1]
        gv_next = gv * alive[:, t]
        gu[:, t, 0] = gv_next * dt
        sec2 = 1.0 / np.cos(d) ** 2
        gu[:, t, 1] = gth * v / wheelbase * dt * sec2
        gv = gv_next + gx * np.cos(th) * dt + gy * np.sin(th) * dt + gth * np.tan(d) / wheelbase * dt
        gth = gth + gx * (-v * np.sin(th) * dt) + gy * (v * np.cos(th) * dt)
    return gu


# ---------------------------------------------------------------------------
# losses


def loss_traj(pred: np.ndarray, target, gates=None) -> float:
    """Gate-weighted mean squared position error over agents and steps."""
    tgt = target.positions if isinstance(target, RecoveryTarget) else np.asarray(target)
    pred = np.asarray(pred)
    if pred.shape != tgt.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {tgt.shape}")
    if pred.size == 0:
        return 0.0
    g = _gate_array(gates, pred.shape[:2])
    return float((g * ((pred - tgt) ** 2).sum(-1)).sum() / (pred.shape[0] * pred.shape[1]))


def _gate_array(gates, shape):
    if gates is None:
        return np.ones(shape)
    g = np.asarray(gates, dtype=float)
    if g.ndim == 1:
        g = np.repeat(g[:, None], shape[1], axis=1)
    if g.shape != shape:
        raise ShapeError(f"gates {g.shape} vs {shape}")
    return g


def loss_smooth(rollout) -> float:
    u = rollout.controls if isinstance(rollout, ControlRollout) else np.asarray(rollout)
    n, tf = u.shape[:2]
    if tf < 2 or n == 0:
        return 0.0
    return float((np.diff(u, axis=1) ** 2).sum() / (n * (tf - 1)))


def safe_distances(agents: Sequence[AgentState]) -> np.ndarray:
    r = np.array([disc_radius(a) for a in agents])
    return r[:, None] + r[None, :] + COLL_MARGIN


def loss_coll(pred: np.ndarray, footprints) -> float:
    """Sum over agent pairs and steps of squared penetration of the safety distance.

    `footprints` is either a list of AgentState or an (N, N) matrix of d_safe.
    """
    pred = np.asarray(pred)
    n = pred.shape[0]
    if n < 2:
        return 0.0
    dsafe = _dsafe(footprints, n)
    diff = pred[:, None, :, :] - pred[None, :, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    pen = np.maximum(0.0, dsafe[:, :, None] - dist)
    iu = np.triu_indices(n, k=1)
    return float((pen[iu] ** 2).sum())


def _dsafe(footprints, n):
    if isinstance(footprints, np.ndarray) and footprints.shape == (n, n):
        return footprints
    if np.isscalar(footprints):
        return np.full((n, n), float(footprints))
    return safe_distances(footprints)


def loss_low(components, lambda_s: float = 0.1, lambda_c: float = 1.0) -> float:
    if lambda_s < 0 or lambda_c < 0:
        raise ValueError("loss weights must be nonnegative")
    l_traj, l_smooth, l_coll = components
    return l_traj + lambda_s * l_smooth + lambda_c * l_coll


# ---------------------------------------------------------------------------
# full chain: value and gradient


@dataclass
class LowSample:
    """One supervised example for the realizer."""

    feats: SceneFeatures
    state0: np.ndarray  # (N, 4)
    wheelbase: np.ndarray  # (N,)
    dsafe: np.ndarray  # (N, N)
    man_idx: np.ndarray
    wp: np.ndarray
    target: np.ndarray  # (N, T_f, 2)
    gates: np.ndarray  # (N, T_f)
    passive: bool = False


def make_sample(history: SceneHistory, commands, target, params_dims: RealizerDims, gates=None,
                passive: bool = False, scene: SceneState | None = None) -> LowSample:
    scene = history.last if scene is None else scene
    feats = featurize(history, scene, params_dims.t_h)
    tgt = target.positions if isinstance(target, RecoveryTarget) else np.asarray(target, dtype=float)
    idx, wp = intent_inputs(commands, scene.agents, params_dims.n_waypoints)
    return LowSample(
        feats=feats,
        state0=np.array([[a.x, a.y, a.heading, a.speed] for a in scene.agents]),
        wheelbase=np.array([a.wheelbase for a in scene.agents]),
        dsafe=safe_distances(scene.agents),
        man_idx=idx,
        wp=wp,
        target=tgt,
        gates=_gate_array(gates, tgt.shape[:2]),
        passive=passive,
    )


@dataclass
class LossBreakdown:
    traj: float
    smooth: float
    coll: float
    total: float


def _coll_grad(pos, dsafe):
    n = pos.shape[0]
    g = np.zeros_like(pos)
    if n < 2:
        return 0.0, g
    diff = pos[:, None, :, :] - pos[None, :, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    pen = np.maximum(0.0, dsafe[:, :, None] - dist)
    pen[np.arange(n), np.arange(n), :] = 0.0
    loss = 0.5 * float((pen**2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = np.where(dist > 1e-12, -2.0 * pen / dist, 0.0)
    # each unordered pair appears twice in the full matrix; the 0.5 above and
    # the symmetric sum below account for that
    g = (coef[:, :, :, None] * diff).sum(axis=1)
    return loss, g


def sample_loss_and_grad(sample: LowSample, params: RealizerParams, lambda_s: float = 0.1, lambda_c: float = 1.0,
                         bounds: ControlBounds = ControlBounds(), dt: float = DT, need_grad: bool = True):
    """loss_low for one sample and, optionally, its gradient w.r.t. all parameters."""
    v = params.view()
    latent = _encode(sample.feats, v)
    if sample.passive:
        C = np.zeros((sample.target.shape[0], params.dims.d_c))
    else:
        C = _intent_from_inputs(sample.man_idx, sample.wp, v)
    controls, dcache = _decode(latent, C, v, bounds)
    states, alive = _rollout_vec(sample.state0, sample.wheelbase, controls, dt)
    pos = states[:, 1:, :2]
    n, tf = pos.shape[:2]
    err = pos - sample.target
    l_traj = float((sample.gates * (err**2).sum(-1)).sum() / (n * tf))
    du = np.diff(controls, axis=1)
    l_smooth = float((du**2).sum() / (n * (tf - 1))) if tf >= 2 else 0.0
    l_coll, gpos_coll = _coll_grad(pos, sample.dsafe)
    total = l_traj + lambda_s * l_smooth + lambda_c * l_coll
    parts = LossBreakdown(l_traj, l_smooth, l_coll, total)
    if not need_grad:
        return parts, None
    gpos = 2.0 * sample.gates[:, :, None] * err / (n * tf) + lambda_c * gpos_coll
    gu = _rollout_backward(states, alive, sample.wheelbase, controls, gpos, dt)
    if tf >= 2:
        gdu = 2.0 * lambda_s * du / (n * (tf - 1))
        gu[:, 1:] += gdu
        gu[:, :-1] -= gdu
    grad = params.layout.zeros()
    g = params.layout.views(grad)
    _backward(v, g, latent, dcache, gu, sample)
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError("non-finite realizer gradient")
    return parts, grad


def _backward(v, g, latent: SceneLatent, dcache, gu, sample: LowSample):
    C, D0, xcache, D1, scache, D2, F, D3, active = dcache
    feats, Hh, w, E0, acache = latent.cache
    R = latent.R
    n = D3.shape[0]
    gU = (gu * active).reshape(n, -1)
    g["Wout"] += D3.T @ gU
    g["bout"] += gU.sum(axis=0)
    gD3 = gU @ v["Wout"].T
    g["W2"] += F.T @ gD3
    g["b2"] += gD3.sum(axis=0)
    gpre = (gD3 @ v["W2"].T) * (1.0 - F * F)
    g["W1"] += D2.T @ gpre
    g["b1"] += gpre.sum(axis=0)
    gD2 = gD3 + gpre @ v["W1"].T
    gq, gkv = _att_backward(v, g, "s", scache, gD2, R)
    gD1 = gD2 + gq + gkv
    gq, gkv = _att_backward(v, g, "x", xcache, gD1, R)
    gD0 = gD1 + gq
    gZ = gD0 + gkv
    g["Wc"] += C.T @ gD0
    if not sample.passive:
        gC = gD0 @ v["Wc"].T
        np.add.at(g["E_man"], sample.man_idx, gC)
        g["W_wp"] += sample.wp.T @ gC
    gq, gkv = _att_backward(v, g, "a", acache, gZ, R)
    gE0 = gZ + gq + gkv
    g["Wm"] += feats.M.T @ gE0
    g["bm"] += gE0.sum(axis=0)
    gP = gE0
    dz = Hh.shape[2]
    gw = np.einsum("nd,ntd->nt", gP, Hh)
    gHh = w[:, :, None] * gP[:, None, :]
    gst = w * (gw - (w * gw).sum(axis=1, keepdims=True))
    gHh += gst[:, :, None] * v["q_t"][None, None, :] / math.sqrt(dz)
    g["q_t"] += np.einsum("nt,ntd->d", gst, Hh) / math.sqrt(dz)
    gA1 = gHh * (1.0 - Hh * Hh)
    g["Wh"] += feats.X.reshape(-1, D_X).T @ gA1.reshape(-1, dz)
    g["bh"] += gA1.sum(axis=(0, 1))


def grad_low(scene: SceneState, history: SceneHistory, commands, target, params: RealizerParams,
             lambda_s: float = 0.1, lambda_c: float = 1.0, gates=None,
             bounds: ControlBounds = ControlBounds()) -> np.ndarray:
    """Gradient of loss_low w.r.t. every realizer parameter."""
    sample = make_sample(history, commands, target, params.dims, gates, scene=scene)
    return sample_loss_and_grad(sample, params, lambda_s, lambda_c, bounds)[1]


def low_loss(scene, history, commands, target, params, lambda_s=0.1, lambda_c=1.0, gates=None,
             bounds: ControlBounds = ControlBounds()) -> LossBreakdown:
    sample = make_sample(history, commands, target, params.dims, gates, scene=scene)
    return sample_loss_and_grad(sample, params, lambda_s, lambda_c, bounds, need_grad=False)[0]


def batch_loss_and_grad(samples: Sequence[LowSample], params: RealizerParams, lambda_s=0.1, lambda_c=1.0,
                        bounds: ControlBounds = ControlBounds(), need_grad: bool = True):
    total = 0.0
    grad = params.layout.zeros() if need_grad else None
    for s in samples:
        parts, g = sample_loss_and_grad(s, params, lambda_s, lambda_c, bounds, need_grad=need_grad)
        total += parts.total
        if need_grad:
            grad += g
    k = max(len(samples), 1)
    return total / k, (grad / k if need_grad else None)


def sgd_step(params: RealizerParams, grad: np.ndarray, step_size: float) -> RealizerParams:
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.flat.shape:
        raise ShapeError("gradient and parameter shapes differ")
    return RealizerParams(params.flat - step_size * grad, params.dims)


class Adam:
    """Adam moments over a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def direction(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1**self.t)
        vh = self.v / (1 - self.beta2**self.t)
        return mh / (np.sqrt(vh) + self.eps)

    def step(self, params: RealizerParams, grad: np.ndarray) -> RealizerParams:
        return sgd_step(params, self.direction(grad), self.lr)
