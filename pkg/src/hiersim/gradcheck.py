"""Finite-difference check of the realizer's analytic gradient on small random fixtures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .commands import Command, Maneuver
from .realizer import (
    RealizerDims,
    RealizerParams,
    _decode,
    _encode,
    _intent_from_inputs,
    _rollout_vec,
    make_sample,
    sample_loss_and_grad,
)
from .scenario import straight_road
from .scene import DT, AgentState, Control, ControlBounds, SceneHistory, SceneState, integrate_bicycle

FIXTURE_DIMS = RealizerDims(d_z=4, d_c=4, t_h=3, t_f=3, n_waypoints=2)
KINK_MARGIN = 0.1

# sixth-order central difference
_STENCIL = ((1, 3 / 4), (2, -3 / 20), (3, 1 / 60))


@dataclass
class GradFixture:
    sample: object
    params: RealizerParams
    lambda_s: float
    lambda_c: float


def _kink_margin(sample, params: RealizerParams, bounds: ControlBounds) -> float:
    """Distance of the forward pass to the nearest non-differentiable point."""
    v = params.view()
    latent = _encode(sample.feats, v)
    C = _intent_from_inputs(sample.man_idx, sample.wp, v)
    controls, cache = _decode(latent, C, v, bounds)
    D3 = cache[-2]
    raw = (D3 @ v["Wout"] + v["bout"]).reshape(controls.shape)
    m = min(
        np.abs(raw[..., 0] - bounds.a_min).min(),
        np.abs(raw[..., 0] - bounds.a_max).min(),
        np.abs(np.abs(raw[..., 1]) - bounds.steer_max).min(),
    )
    states, _ = _rollout_vec(sample.state0, sample.wheelbase, controls, DT)
    m = min(m, np.abs(states[:, :-1, 3] + controls[..., 0] * DT).min())
    pos = states[:, 1:, :2]
    n = pos.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            d = np.sqrt(((pos[i] - pos[j]) ** 2).sum(-1))
            m = min(m, np.abs(sample.dsafe[i, j] - d).min())
    return float(m)


def random_fixture(seed: int, n_agents: int = 2, dims: RealizerDims = FIXTURE_DIMS,
                   bounds: ControlBounds = ControlBounds()) -> GradFixture:
    """A seeded random scene, command set, target and parameter vector.

    Draws are repeated until the forward pass keeps KINK_MARGIN away from
    control clamps, the speed floor and the collision hinge.
    """
    net = straight_road().build_network()
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        agents = []
        x = rng.uniform(20.0, 40.0)
        for k in range(n_agents):
            agents.append(AgentState(
                x, rng.uniform(-1.2, 1.2), rng.uniform(-0.2, 0.2), rng.uniform(3.0, 10.0),
                route_id="r0", agent_id=k,
            ))
            x += rng.uniform(3.0, 5.0)
        # history by integrating random controls forward
        states = [agents]
        for _ in range(dims.t_h - 1):
            states.append([integrate_bicycle(a, Control(rng.uniform(-1, 1), rng.uniform(-0.05, 0.05)))
                           for a in states[-1]])
        h = SceneHistory(dims.t_h)
        for k, ag in enumerate(states):
            h = h.push(SceneState(round(k * DT, 9), ag, net))
        scene = h.last
        cmds = []
        for a in scene.agents:
            wps = tuple((a.x + 5.0 * (m + 1), a.y + rng.normal(0, 0.5)) for m in range(dims.n_waypoints))
            cmds.append(Command(Maneuver(int(rng.integers(5))), wps))
        target = np.array([[[a.x + a.speed * DT * (t + 1), a.y] for t in range(dims.t_f)] for a in scene.agents])
        target += rng.normal(0.0, 0.3, target.shape)
        gates = rng.choice([1.0, 0.2], size=n_agents)
        params = RealizerParams.init(dims, seed=int(rng.integers(1 << 31)), scale=0.5, head_scale=0.3)
        sample = make_sample(h, cmds, target, dims, gates)
        if _kink_margin(sample, params, bounds) > KINK_MARGIN:
            return GradFixture(sample, params, 0.1, 1.0)
    raise RuntimeError("could not draw a smooth fixture")


def finite_difference(fx: GradFixture, h: float = 1e-2) -> np.ndarray:
    dims = fx.params.dims

    def f(flat):
        p = RealizerParams(flat, dims)
        return sample_loss_and_grad(fx.sample, p, fx.lambda_s, fx.lambda_c, need_grad=False)[0].total

    base = fx.params.flat
    out = np.zeros_like(base)
    for k in range(base.size):
        acc = 0.0
        for m, c in _STENCIL:
            e = np.zeros_like(base)
            e[k] = m * h
            acc += c * (f(base + e) - f(base - e))
        out[k] = acc / h
    return out


@dataclass
class GradReport:
    seed: int
    n_params: int
    n_checked: int
    max_rel_err: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def check_fixture(seed: int, floor: float = 1e-8, lambda_s: float = 0.1, lambda_c: float = 1.0) -> GradReport:
    fx = random_fixture(seed)
    fx.lambda_s, fx.lambda_c = lambda_s, lambda_c
    _, g = sample_loss_and_grad(fx.sample, fx.params, fx.lambda_s, fx.lambda_c)
    fd = finite_difference(fx)
    mask = np.abs(g) > floor
    rel = np.abs(g - fd)[mask] / np.abs(g)[mask]
    return GradReport(seed, g.size, int(mask.sum()), float(rel.max()) if rel.size else 0.0)
