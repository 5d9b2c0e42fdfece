import numpy as np
import pytest
from hypothesis import settings

from hiersim.scenario import intersection, straight_road
from hiersim.scene import AgentState, SceneHistory, SceneState

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# acceptance criteria: one summary line each at the end of the run
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
    _CRITERIA[mark.args[0]] = (mark.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} {name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def road_net():
    return straight_road().build_network()


@pytest.fixture(scope="session")
def cross_net():
    return intersection().build_network()


def agent(x, y=0.0, heading=0.0, speed=0.0, k=0, route="r0", **kw):
    return AgentState(float(x), float(y), float(heading), float(speed), route_id=route, agent_id=k, **kw)


def history_of(scenes, capacity=10):
    h = SceneHistory(capacity)
    for s in scenes:
        h = h.push(s)
    return h


def static_history(agents, net, n=3, capacity=10):
    """n identical snapshots of the agents, dt apart."""
    return history_of([SceneState(round(k * 0.1, 9), tuple(agents), net) for k in range(n)], capacity)


def rng(seed=0):
    return np.random.default_rng(seed)


def on_route(net, route, s, speed=0.0, k=0, lateral=0.0):
    """An agent placed at arc length s on a route, optionally offset to the left."""
    import math

    x, y, h = net.route_info[route].path.point_at(s)
    return AgentState(x - math.sin(h) * lateral, y + math.cos(h) * lateral, h, float(speed),
                      route_id=route, agent_id=k)


def moving_history(agents, net, n=10, capacity=10):
    """n snapshots of the agents coasting at constant speed and heading."""
    from hiersim.scene import Control, integrate_bicycle

    scenes = []
    cur = list(agents)
    for k in range(n):
        scenes.append(SceneState(round(k * 0.1, 9), tuple(cur), net))
        cur = [integrate_bicycle(a, Control()) for a in cur]
    return history_of(scenes, capacity)
