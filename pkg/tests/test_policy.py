import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiersim.commands import N_MANEUVERS, Command, Maneuver
from hiersim.errors import ArityError
from hiersim.policy import (
    SLOT_FEATURES,
    Decision,
    HighPolicyParams,
    PolicyDims,
    build_subgame_state,
    conditional_distribution,
    episode_return,
    joint_log_prob,
    log_prob_grad,
    make_ordering,
    reinforce_update,
    rewards_to_go,
    sample_commands,
    scene_features,
)
from hiersim.scene import SceneState

from conftest import on_route

ROUTES = ["W_straight", "E_left", "S_straight", "N_left", "W_left", "E_straight"]


def random_scene(net, seed, n):
    r = np.random.default_rng(seed)
    routes = r.choice(ROUTES, size=n, replace=False)
    agents = [on_route(net, rid, r.uniform(30.0, 85.0), r.uniform(0.0, 12.0), k) for k, rid in enumerate(routes)]
    return SceneState(0.0, tuple(agents), net)


def all_commands(n):
    for combo in itertools.product(range(N_MANEUVERS), repeat=n):
        yield [Command(Maneuver(m)) for m in combo]


# --- ordering ----------------------------------------------------------------

def test_ordering_single(cross_net):
    assert make_ordering(SceneState(0.0, (on_route(cross_net, "W_straight", 40.0),), cross_net)) == [0]


def test_ordering_by_conflict_distance(cross_net):
    # both on the same approach, conflict near s = 87: 5 m vs 3 m away
    conf = cross_net.route_info["W_straight"].conflicts[0][0]
    a = on_route(cross_net, "W_straight", conf - 5.0, k=0)
    b = on_route(cross_net, "W_straight", conf - 3.0, k=1)
    assert make_ordering(SceneState(0.0, (a, b), cross_net)) == [1, 0]


def test_ordering_ties_by_index(cross_net):
    a = on_route(cross_net, "W_straight", 40.0, k=7)
    b = on_route(cross_net, "W_straight", 40.0, k=3)
    assert make_ordering(SceneState(0.0, (a, b), cross_net)) == [0, 1]
    assert make_ordering(SceneState(0.0, (b, a), cross_net)) == [0, 1]


# --- sub-game state ------------------------------------------------------------

def test_leader_has_empty_slots(cross_net):
    scene = random_scene(cross_net, 0, 3)
    st_ = build_subgame_state(scene, None, [0, 1, 2], [], 1)
    assert not st_.command_slots.any()
    assert not st_.pooled.any()


def test_second_agent_sees_maintain_slot(cross_net):
    scene = random_scene(cross_net, 0, 3)
    st_ = build_subgame_state(scene, None, [0, 1, 2], [Command(Maneuver.MAINTAIN)], 2)
    assert st_.command_slots[0, Maneuver.MAINTAIN] == 1.0
    assert st_.command_slots[0, :N_MANEUVERS].sum() == 1.0
    assert not st_.command_slots[1:].any()
    assert st_.command_slots.shape == (PolicyDims().n_max - 1, SLOT_FEATURES)


def test_arity_errors(cross_net):
    scene = random_scene(cross_net, 0, 2)
    with pytest.raises(ArityError):
        build_subgame_state(scene, None, [0, 1], [], 2)
    with pytest.raises(ArityError):
        joint_log_prob(scene, None, HighPolicyParams.zeros(), [0, 1], [Command(Maneuver.MAINTAIN)])


@given(st.integers(0, 10_000))
def test_knn_features_invariant_to_permutation(seed):
    from hiersim.scenario import intersection

    net = intersection().build_network()
    scene = random_scene(net, seed, 5)
    perm = np.random.default_rng(seed + 1).permutation(5)
    permuted = SceneState(0.0, tuple(scene.agents[p] for p in perm), net)
    i = 0
    j = int(np.where(perm == i)[0][0])
    dims = PolicyDims()
    assert np.array_equal(scene_features(scene, None, i, dims), scene_features(permuted, None, j, dims))


# --- sampling and probabilities -----------------------------------------------

def test_uniform_single_agent(cross_net):
    scene = random_scene(cross_net, 1, 1)
    p = conditional_distribution(scene, None, HighPolicyParams.zeros(), [0], [], 1)
    np.testing.assert_allclose(p, 0.2, rtol=0, atol=1e-15)
    for cmds in all_commands(1):
        assert joint_log_prob(scene, None, HighPolicyParams.zeros(), [0], cmds) == pytest.approx(math.log(0.2))
    _, lp = sample_commands(scene, None, HighPolicyParams.zeros(), [0], 3)
    assert lp[0] == pytest.approx(math.log(0.2))


def test_uniform_pairs_exhaustive(cross_net):
    scene = random_scene(cross_net, 2, 2)
    probs = [math.exp(joint_log_prob(scene, None, HighPolicyParams.zeros(), [0, 1], c)) for c in all_commands(2)]
    assert len(probs) == 25
    np.testing.assert_allclose(probs, 0.04, rtol=0, atol=1e-15)


def test_sampling_deterministic_and_consistent(cross_net):
    scene = random_scene(cross_net, 3, 3)
    params = HighPolicyParams.init(seed=4)
    order = make_ordering(scene)
    a = sample_commands(scene, None, params, order, 11)
    b = sample_commands(scene, None, params, order, 11)
    assert a == b
    cmds, lps = a
    assert joint_log_prob(scene, None, params, order, cmds) == pytest.approx(sum(lps), abs=1e-12)


def test_sampling_frequencies_follow_distribution(cross_net):
    scene = random_scene(cross_net, 5, 1)
    params = HighPolicyParams.init(seed=2)
    p = conditional_distribution(scene, None, params, [0], [], 1)
    r = np.random.default_rng(0)
    counts = np.zeros(N_MANEUVERS)
    for _ in range(4000):
        cmds, _ = sample_commands(scene, None, params, [0], r)
        counts[int(cmds[0].maneuver)] += 1
    assert np.abs(counts / 4000 - p).max() < 0.03


@pytest.mark.parametrize("n", [1, 2, 3])
def test_factorization_normalizes(cross_net, n):
    for seed in range(4):
        scene = random_scene(cross_net, 100 + seed, n)
        params = HighPolicyParams.init(seed=seed, scale=1.0)
        order = make_ordering(scene)
        total = sum(math.exp(joint_log_prob(scene, None, params, order, c)) for c in all_commands(n))
        assert abs(total - 1.0) <= 1e-9


def test_waypoints_follow_route(cross_net):
    scene = random_scene(cross_net, 6, 1)
    cmds, _ = sample_commands(scene, None, HighPolicyParams.zeros(), [0], 0)
    wps = np.array(cmds[0].waypoints)
    assert wps.shape == (4, 2)
    steps = np.sqrt((np.diff(wps, axis=0) ** 2).sum(-1))
    assert np.all(steps <= 5.0 + 1e-9)


# --- Stackelberg structure ------------------------------------------------------

def stackelberg_fixture(net):
    scene = SceneState(0.0, (on_route(net, "W_straight", 75.0, 8.0, 0), on_route(net, "S_straight", 70.0, 8.0, 1)), net)
    return scene, HighPolicyParams.init(seed=0, scale=1.0)


def total_variation(p, q):
    return 0.5 * float(np.abs(p - q).sum())


def test_follower_conditioned_on_leader(cross_net):
    scene, params = stackelberg_fixture(cross_net)
    order = make_ordering(scene)
    p_m = conditional_distribution(scene, None, params, order, [Command(Maneuver.MAINTAIN)], 2)
    p_y = conditional_distribution(scene, None, params, order, [Command(Maneuver.YIELD)], 2)
    assert total_variation(p_m, p_y) > 0.01


def test_leader_invariant_to_followers(cross_net):
    scene, params = stackelberg_fixture(cross_net)
    order = make_ordering(scene)
    leader = order[0]
    ref = conditional_distribution(scene, None, params, order, [], 1)
    for cmds in all_commands(2):
        st_ = build_subgame_state(scene, None, order, [], 1)
        assert np.array_equal(np.exp(np.log(ref)), ref)
        assert np.array_equal(conditional_distribution(scene, None, params, order, [], 1), ref)
        # the leader's term of the joint never changes with what the follower does
        lp = joint_log_prob(scene, None, params, order, cmds) - math.log(
            conditional_distribution(scene, None, params, order, [cmds[leader]], 2)[int(cmds[order[1]].maneuver)])
        assert lp == pytest.approx(math.log(ref[int(cmds[leader].maneuver)]), abs=1e-12)
        assert not st_.command_slots.any()


# --- returns and REINFORCE ------------------------------------------------------

def test_episode_return_examples():
    assert episode_return([1, 1], 0.9) == pytest.approx(1.9)
    assert episode_return([0, 0, 0], 0.7) == 0.0
    assert episode_return([1, 2, 3], 0.5) == pytest.approx(2.75)
    with pytest.raises(ValueError):
        episode_return([1], 1.5)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(0, 1))
def test_rewards_to_go_head_is_return(rs, g):
    rtg = rewards_to_go(rs, g)
    assert rtg[0] == pytest.approx(episode_return(rs, g), abs=1e-9)
    for t in range(len(rs) - 1):
        assert rtg[t] == pytest.approx(rs[t] + g * rtg[t + 1], abs=1e-9)


def test_log_prob_grad_matches_finite_differences():
    dims = PolicyDims(hidden=6)
    r = np.random.default_rng(0)
    params = HighPolicyParams.init(dims, seed=1, scale=1.0)
    phi = r.normal(size=(3, dims.feature_dim))
    acts = r.integers(0, N_MANEUVERS, 3)
    w = r.normal(size=3)
    from hiersim.policy import maneuver_log_probs

    def f(flat):
        p = HighPolicyParams(flat, dims)
        lp = maneuver_log_probs(p, phi)
        return float((w * lp[np.arange(3), acts]).sum())

    g = log_prob_grad(params, phi, acts, w)
    h = 1e-5
    fd = np.zeros_like(g)
    for k in range(g.size):
        e = np.zeros_like(g)
        e[k] = h
        fd[k] = (f(params.flat + e) - f(params.flat - e)) / (2 * h)
    mask = np.abs(g) > 1e-8
    assert np.max(np.abs(g - fd)[mask] / np.abs(g)[mask]) < 1e-4


def test_equal_returns_leave_params_unchanged():
    params = HighPolicyParams.init(seed=0)
    phi = np.ones(params.dims.feature_dim)
    batch = [(Decision(phi, a, 0), 3.0) for a in range(5)]
    assert np.array_equal(reinforce_update(params, batch, 0.1).flat, params.flat)


def _bandit(rewards, gamma, updates, seed=0, batch_size=8):
    """Single-state problem; returns the learned action probabilities."""
    dims = PolicyDims(hidden=4)
    params = HighPolicyParams.zeros(dims)
    phi = np.zeros(dims.feature_dim)
    phi[0] = 1.0
    r = np.random.default_rng(seed)
    from hiersim.policy import maneuver_log_probs

    for _ in range(updates):
        p = np.exp(maneuver_log_probs(params, phi))
        batch = []
        for a in r.choice(N_MANEUVERS, size=batch_size, p=p / p.sum()):
            g = rewards_to_go(rewards(int(a)), gamma)[0]
            batch.append((Decision(phi, int(a), 0), g))
        params = reinforce_update(params, batch, 0.1)
    return np.exp(maneuver_log_probs(params, phi))


def test_bandit_converges():
    p = _bandit(lambda a: [1.0 if a == Maneuver.YIELD else 0.0], 0.95, 2000)
    assert p[Maneuver.YIELD] > 0.9


def test_zero_gamma_ignores_delayed_reward():
    # maneuver 0 pays 1 now; maneuver 1 pays 5 one step later
    def rewards(a):
        return {0: [1.0, 0.0], 1: [0.0, 5.0]}.get(a, [0.0, 0.0])

    myopic = _bandit(rewards, 0.0, 600)
    farsighted = _bandit(rewards, 1.0, 600)
    assert myopic[0] > 0.8
    assert farsighted[1] > 0.8
