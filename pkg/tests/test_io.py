import json
import math
import re

import numpy as np
import pytest
from conftest import agent

from hiersim import cli
from hiersim.closed_loop import EpisodeConfig, run_episode
from hiersim.errors import ResolutionError, TrainingDivergenceError, UnknownFieldError, ValidationError, VersionError
from hiersim.io import (
    CKPT_VERSION,
    LOG_HEADER,
    RunConfig,
    checkpoint_bytes,
    dump_run_config,
    load_checkpoint,
    parse_run_config,
    parse_scenario,
    params_from_bytes,
    read_log,
    records_from_rows,
    save_checkpoint,
    serialize_scenario,
    write_log,
)
from hiersim.policy import HighPolicyParams
from hiersim.realizer import RealizerParams
from hiersim.records import StepRecord
from hiersim.render import render_frames
from hiersim.scenario import grid2x2, intersection, straight_road
from hiersim.scene import Control, integrate_bicycle

HIGH = HighPolicyParams.init(seed=0, maintain_prior=3.0)
LOW = RealizerParams.init(seed=0)
SHORT = EpisodeConfig(max_steps=40, ade_stride=0)


@pytest.fixture(scope="module")
def episode():
    return run_episode(SHORT, HIGH, LOW, intersection())


# ---------------------------------------------------------------------------
# scenarios


@pytest.mark.parametrize("make", [straight_road, intersection, grid2x2])
def test_scenario_round_trip(make):
    sc = make()
    text = serialize_scenario(sc)
    again = parse_scenario(text)
    assert serialize_scenario(again) == text
    assert again.build_network().route_info.keys() == sc.build_network().route_info.keys()


def _doc():
    return json.loads(serialize_scenario(straight_road()))


def test_scenario_unknown_field():
    d = _doc()
    d["lanes"][0]["colour"] = "red"
    with pytest.raises(UnknownFieldError):
        parse_scenario(json.dumps(d))


def test_scenario_missing_lane():
    d = _doc()
    d["routes"][0]["lanes"] = ["nope"]
    with pytest.raises(ResolutionError):
        parse_scenario(json.dumps(d))


def test_scenario_missing_route_in_spawn():
    d = _doc()
    d["spawns"][0]["route"] = "r9"
    with pytest.raises(ResolutionError):
        parse_scenario(json.dumps(d))


def test_scenario_version():
    d = _doc()
    d["version"] = 99
    with pytest.raises(VersionError):
        parse_scenario(json.dumps(d))


def test_scenario_not_json():
    with pytest.raises(ValidationError):
        parse_scenario("{")


# ---------------------------------------------------------------------------
# logs


def test_log_round_trip(episode):
    data = write_log(episode.records)
    rows = read_log(data)
    assert sum(len(r.agents) for r in episode.records) == len(rows)
    recs = records_from_rows(rows)
    assert write_log(recs) == data
    for a, b in zip(episode.records, recs):
        assert a.time == b.time
        assert [(s.x, s.y, s.heading, s.speed) for s in a.agents] == [(s.x, s.y, s.heading, s.speed) for s in b.agents]
        assert a.controls == b.controls


def test_empty_log_is_header_only():
    assert write_log([]) == (LOG_HEADER + "\n").encode()
    assert read_log(write_log([])) == []


def test_replay_reproduces_positions(episode):
    recs = records_from_rows(read_log(write_log(episode.records)))
    n = 0
    for cur, nxt in zip(recs, recs[1:]):
        after = {a.agent_id: a for a in nxt.agents}
        for a, u in zip(cur.agents, cur.controls):
            if a.agent_id in after:
                b = integrate_bicycle(a, u)
                assert (b.x, b.y, b.heading, b.speed) == (
                    after[a.agent_id].x, after[a.agent_id].y, after[a.agent_id].heading, after[a.agent_id].speed)
                n += 1
    assert n > 0


@pytest.mark.parametrize("bad", ["", "time,agent\n", LOG_HEADER + "\n0,0,1,2\n",
                                 LOG_HEADER + "\n0.1,0,0,0,0,0,0,0,Maintain,0\n0.0,0,0,0,0,0,0,0,Maintain,0\n"])
def test_bad_logs(bad):
    with pytest.raises(ValidationError):
        read_log(bad)


# ---------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("params", [LOW, HIGH])
def test_checkpoint_round_trip(tmp_path, params):
    save_checkpoint(tmp_path / "p.ckpt", params)
    back = load_checkpoint(tmp_path / "p.ckpt")
    assert type(back) is type(params)
    assert np.array_equal(back.flat, params.flat)


def test_checkpoint_errors():
    data = checkpoint_bytes(LOW)
    with pytest.raises(ValidationError):
        params_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(VersionError):
        params_from_bytes(data[:4] + (CKPT_VERSION + 1).to_bytes(4, "little") + data[8:])
    with pytest.raises(ValidationError):
        params_from_bytes(data[:-8])
    with pytest.raises(ValidationError):
        params_from_bytes(data[:6])


# ---------------------------------------------------------------------------
# run config


def test_run_config_round_trip():
    cfg = RunConfig(seed=4)
    assert dump_run_config(parse_run_config(dump_run_config(cfg))) == dump_run_config(cfg)


def test_run_config_errors(tmp_path):
    with pytest.raises(UnknownFieldError):
        parse_run_config('{"bogus": 1}')
    with pytest.raises(ValidationError):
        parse_run_config('{"episode": {"t_f": 4}}')
    with pytest.raises(ResolutionError):
        parse_run_config('{"low_checkpoint": "missing.ckpt"}', tmp_path)


# ---------------------------------------------------------------------------
# render


def test_render_empty_log_is_network_only():
    frames = render_frames([], intersection())
    assert len(frames) == 1
    assert "polyline" in frames[0] and "polygon" not in frames[0]


@pytest.mark.parametrize("n,stride", [(1, 1), (7, 3), (9, 3), (10, 10)])
def test_render_frame_count(n, stride):
    recs = [StepRecord(0.1 * k, (agent(20.0 + k),), (Control(0.0, 0.0),)) for k in range(n)]
    assert len(render_frames(recs, straight_road(), stride)) == math.ceil(n / stride)


def test_render_rectangle_center(episode):
    rec = episode.records[10]
    svg = render_frames([rec], intersection())[0]
    x0 = float(re.search(r'data-x0="([^"]+)"', svg).group(1))
    y1 = float(re.search(r'data-y1="([^"]+)"', svg).group(1))
    scale = float(re.search(r'data-scale="([^"]+)"', svg).group(1))
    polys = re.findall(r'<polygon[^>]*data-agent="(\d+)"[^>]*points="([^"]+)"', svg)
    assert len(polys) == len(rec.agents)
    byid = {a.agent_id: a for a in rec.agents}
    for aid, pts in polys:
        uv = np.array([[float(c) for c in p.split(",")] for p in pts.split()])
        u, v = uv.mean(axis=0)
        a = byid[int(aid)]
        assert u / scale + x0 == pytest.approx(a.x, abs=2e-3)
        assert y1 - v / scale == pytest.approx(a.y, abs=2e-3)


# ---------------------------------------------------------------------------
# CLI


def _config(tmp_path, **episode):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"episode": {"max_steps": 30, "ade_stride": 0, **episode}}))
    return str(p)


def _simulate(tmp_path, name, *extra):
    out = tmp_path / name
    code = cli.main(["simulate", "--config", _config(tmp_path), "--seed", "3", "--episodes", "2",
                     "--out", str(out), *extra])
    return code, out


def test_cli_simulate_deterministic(tmp_path):
    c1, a = _simulate(tmp_path, "a")
    c2, b = _simulate(tmp_path, "b")
    c3, w = _simulate(tmp_path, "w", "--workers", "2")
    assert c1 == c2 == c3 == cli.EXIT_OK
    for name in ("episode_000.log", "episode_001.log", "metrics.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (w / name).read_bytes()


def test_cli_eval_and_render(tmp_path, capsys):
    _, out = _simulate(tmp_path, "a")
    logs = [str(out / "episode_000.log"), str(out / "episode_001.log")]
    assert cli.main(["eval", *logs, "--out", str(tmp_path / "m.txt")]) == cli.EXIT_OK
    assert (tmp_path / "m.txt").read_text() == (out / "metrics.txt").read_text()
    log = logs[0]
    assert cli.main(["render", log, "--out", str(tmp_path / "frames"), "--stride", "10"]) == cli.EXIT_OK
    assert len(list((tmp_path / "frames").glob("*.svg"))) == 3


def test_cli_validation_exit(tmp_path):
    d = _doc()
    d["extra"] = 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(d))
    assert cli.main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_VALIDATION
    assert cli.main(["simulate", "--scenario", "nowhere.json", "--out", str(tmp_path / "o")]) == cli.EXIT_VALIDATION


def test_cli_divergence_exit(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingDivergenceError("nan")

    monkeypatch.setattr(cli, "cotrain", boom)
    assert cli.main(["cotrain", "--out", str(tmp_path / "o"), "--epochs", "1"]) == cli.EXIT_DIVERGENCE


def test_cli_gradcheck(tmp_path):
    assert cli.main(["gradcheck", "--fixtures", "1", "--out", str(tmp_path / "g.txt")]) == cli.EXIT_OK
    assert "gradcheck passed" in (tmp_path / "g.txt").read_text()
