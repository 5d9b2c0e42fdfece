"""Scenario and run-config files, trajectory logs and parameter checkpoints."""

from __future__ import annotations

import dataclasses
import io as _io
import json
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .closed_loop import EpisodeConfig, TrainConfig
from .commands import Maneuver
from .errors import (
    ResolutionError,
    ScenarioError,
    UnknownFieldError,
    ValidationError,
    VersionError,
)
from .expert import ExpertConfig
from .policy import HighPolicyParams, PolicyDims
from .realizer import RealizerDims, RealizerParams
from .records import StepRecord
from .scenario import BUILTIN, FORMAT_VERSION, ScenarioFile, SpawnEvent, VehicleDefaults
from .scene import AgentState, Control, Junction, Lane, Route, SignalPhase

# ---------------------------------------------------------------------------
# scenarios


def _fields(d, allowed: dict, where: str) -> dict:
    """Check a JSON object against {name: required}."""
    if not isinstance(d, dict):
        raise ScenarioError(f"{where} must be an object")
    for k in d:
        if k not in allowed:
            raise UnknownFieldError(k, where)
    for k, required in allowed.items():
        if required and k not in d:
            raise ScenarioError(f"missing field {k!r} in {where}")
    return d


def _point(p, where):
    if not (isinstance(p, (list, tuple)) and len(p) == 2):
        raise ScenarioError(f"{where}: points must be [x, y] pairs")
    return [float(p[0]), float(p[1])]


def parse_scenario(text: str) -> ScenarioFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"scenario is not valid JSON: {e}") from None
    _fields(doc, {"version": True, "name": False, "vehicle": False, "lanes": True, "routes": True,
                  "junctions": False, "spawns": False}, "scenario")
    if doc["version"] != FORMAT_VERSION:
        raise VersionError(f"unsupported scenario version {doc['version']!r} (expected {FORMAT_VERSION})")

    veh = VehicleDefaults()
    if "vehicle" in doc:
        v = _fields(doc["vehicle"], {"wheelbase": False, "half_length": False, "half_width": False}, "vehicle")
        veh = VehicleDefaults(**{k: float(x) for k, x in v.items()})

    lanes = []
    for k, ld in enumerate(doc["lanes"]):
        where = f"lanes[{k}]"
        _fields(ld, {"id": True, "points": True, "width": False, "speed_limit": False}, where)
        kw = {name: float(ld[name]) for name in ("width", "speed_limit") if name in ld}
        lanes.append(Lane(str(ld["id"]), [_point(p, where) for p in ld["points"]], **kw))
    lane_ids = {ln.id for ln in lanes}

    routes = []
    for k, rd in enumerate(doc["routes"]):
        _fields(rd, {"id": True, "lanes": True}, f"routes[{k}]")
        for lid in rd["lanes"]:
            if lid not in lane_ids:
                raise ResolutionError("lane", lid, f"route {rd['id']!r}")
        routes.append(Route(str(rd["id"]), [str(x) for x in rd["lanes"]]))
    route_ids = {r.id for r in routes}

    junctions = []
    for k, jd in enumerate(doc.get("junctions", [])):
        where = f"junctions[{k}]"
        _fields(jd, {"id": True, "center": True, "conflict_points": False, "phases": False, "offset": False}, where)
        phases = []
        for m, pd in enumerate(jd.get("phases", [])):
            _fields(pd, {"duration": True, "green": True}, f"{where}.phases[{m}]")
            for lid in pd["green"]:
                if lid not in lane_ids:
                    raise ResolutionError("lane", lid, f"junction {jd['id']!r}")
            phases.append(SignalPhase(float(pd["duration"]), [str(x) for x in pd["green"]]))
        junctions.append(Junction(
            str(jd["id"]),
            _point(jd["center"], where),
            [_point(p, where) for p in jd.get("conflict_points", [])],
            phases,
            float(jd.get("offset", 0.0)),
        ))

    spawns = []
    for k, sd in enumerate(doc.get("spawns", [])):
        _fields(sd, {"time": True, "route": True, "speed": False}, f"spawns[{k}]")
        if sd["route"] not in route_ids:
            raise ResolutionError("route", sd["route"], f"spawns[{k}]")
        spawns.append(SpawnEvent(float(sd["time"]), str(sd["route"]), float(sd.get("speed", 0.0))))

    sc = ScenarioFile(str(doc.get("name", "")), lanes, routes, junctions, spawns, veh, FORMAT_VERSION)
    sc.build_network()  # route continuity and junction checks
    return sc


def scenario_to_dict(sc: ScenarioFile) -> dict:
    return {
        "version": sc.version,
        "name": sc.name,
        "vehicle": dataclasses.asdict(sc.vehicle),
        "lanes": [
            {"id": ln.id, "points": [[float(x), float(y)] for x, y in ln.points],
             "width": float(ln.width), "speed_limit": float(ln.speed_limit)}
            for ln in sc.lanes
        ],
        "routes": [{"id": r.id, "lanes": list(r.lanes)} for r in sc.routes],
        "junctions": [
            {
                "id": j.id,
                "center": [float(j.center[0]), float(j.center[1])],
                "conflict_points": [[float(x), float(y)] for x, y in j.conflict_points],
                "phases": [{"duration": float(p.duration), "green": list(p.green)} for p in j.phases],
                "offset": float(j.offset),
            }
            for j in sc.junctions
        ],
        "spawns": [{"time": float(s.time), "route": s.route, "speed": float(s.speed)} for s in sc.spawns],
    }


def serialize_scenario(sc: ScenarioFile) -> str:
    """Canonical text: sorted keys, two-space indent, floats in shortest repr."""
    return json.dumps(scenario_to_dict(sc), sort_keys=True, indent=2) + "\n"


def load_scenario(name_or_path: str | Path) -> ScenarioFile:
    """A bundled scenario by name, or a scenario file."""
    if str(name_or_path) in BUILTIN:
        return BUILTIN[str(name_or_path)]()
    p = Path(name_or_path)
    if not p.exists():
        raise ResolutionError("scenario", str(name_or_path))
    return parse_scenario(p.read_text())


# ---------------------------------------------------------------------------
# run config


def _build(cls, d, where: str, skip=()):
    """Instantiate a (possibly nested) dataclass from a JSON object."""
    if not isinstance(d, dict):
        raise ValidationError(f"{where} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.name not in skip and not f.name.startswith("_")}
    kw = {}
    for k, v in d.items():
        if k not in names:
            raise UnknownFieldError(k, where)
        t = hints[k]
        if dataclasses.is_dataclass(t):
            kw[k] = _build(t, v, f"{where}.{k}")
        elif isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{where}: {e}") from None


def _to_dict(obj, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in skip or f.name.startswith("_"):
            continue
        v = getattr(obj, f.name)
        out[f.name] = _to_dict(v) if dataclasses.is_dataclass(v) else (list(v) if isinstance(v, tuple) else v)
    return out


@dataclass
class RunConfig:
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    realizer: RealizerDims = field(default_factory=RealizerDims)
    policy: PolicyDims = field(default_factory=PolicyDims)
    seed: int = 0
    maintain_prior: float = 3.0
    high_checkpoint: Optional[str] = None
    low_checkpoint: Optional[str] = None
    output_dir: str = "out"

    def __post_init__(self):
        if self.episode.t_f != self.realizer.t_f or self.episode.t_h != self.realizer.t_h:
            raise ValidationError("episode t_f/t_h must match the realizer dimensions")
        for name, w in dataclasses.asdict(self.episode.rewards).items():
            if w < 0:
                raise ValidationError(f"reward weight {name} must be >= 0")
        if self.train.lambda_s < 0 or self.train.lambda_c < 0:
            raise ValidationError("loss weights must be >= 0")

    @property
    def expert(self) -> ExpertConfig:
        return self.episode.expert


_EPISODE_SKIP = ("spawns",)


def run_config_to_dict(cfg: RunConfig) -> dict:
    d = _to_dict(cfg)
    d["episode"] = _to_dict(cfg.episode, skip=_EPISODE_SKIP)
    return d


def dump_run_config(cfg: RunConfig) -> str:
    return json.dumps(run_config_to_dict(cfg), sort_keys=True, indent=2) + "\n"


def parse_run_config(text: str, base_dir: str | Path | None = None) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"config is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config must be an object")
    doc = dict(doc)
    kw = {}
    sections = {"episode": EpisodeConfig, "train": TrainConfig, "realizer": RealizerDims, "policy": PolicyDims}
    for k, v in doc.items():
        if k in sections:
            kw[k] = _build(sections[k], v, k, skip=_EPISODE_SKIP if k == "episode" else ())
        elif k in {f.name for f in dataclasses.fields(RunConfig)}:
            kw[k] = v
        else:
            raise UnknownFieldError(k, "config")
    cfg = RunConfig(**kw)
    base = Path(base_dir) if base_dir is not None else Path(".")
    for name in ("high_checkpoint", "low_checkpoint"):
        p = getattr(cfg, name)
        if p is not None:
            full = Path(p) if Path(p).is_absolute() else base / p
            if not full.exists():
                raise ResolutionError("file", str(p), name)
            setattr(cfg, name, str(full))
    return cfg


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ResolutionError("file", str(path), "--config")
    return parse_run_config(p.read_text(), p.parent)


# ---------------------------------------------------------------------------
# trajectory logs

LOG_COLUMNS = ("time", "agent", "x", "y", "heading", "speed", "accel", "steer", "maneuver", "reward")
LOG_HEADER = ",".join(LOG_COLUMNS)


@dataclass(frozen=True)
class LogRow:
    time: float
    agent: int
    x: float
    y: float
    heading: float
    speed: float
    accel: float
    steer: float
    maneuver: str
    reward: float


def _f(v: float) -> str:
    return format(float(v), ".17g")


def log_rows(records: Iterable[StepRecord]) -> list:
    rows = []
    for rec in records:
        for k, (a, u) in enumerate(zip(rec.agents, rec.controls)):
            man = rec.commands[k].maneuver.label if rec.commands else Maneuver.MAINTAIN.label
            r = rec.rewards[k] if rec.rewards else 0.0
            rows.append(LogRow(rec.time, a.agent_id, a.x, a.y, a.heading, a.speed, u.accel, u.steer, man, r))
    return rows


def write_log(records: Iterable[StepRecord], stream=None) -> bytes:
    """One line per (step, agent); floats with 17 significant digits."""
    buf = _io.StringIO()
    buf.write(LOG_HEADER + "\n")
    for r in log_rows(records):
        buf.write(",".join((
            _f(r.time), str(r.agent), _f(r.x), _f(r.y), _f(r.heading), _f(r.speed),
            _f(r.accel), _f(r.steer), r.maneuver, _f(r.reward),
        )) + "\n")
    data = buf.getvalue().encode("ascii")
    if stream is not None:
        stream.write(data)
    return data


def read_log(data: bytes | str) -> list:
    text = data.decode("ascii") if isinstance(data, bytes) else data
    lines = text.splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ValidationError("log header does not match the expected columns")
    rows = []
    prev = None
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(LOG_COLUMNS):
            raise ValidationError(f"log line {n}: expected {len(LOG_COLUMNS)} columns")
        try:
            row = LogRow(
                float(parts[0]), int(parts[1]), *(float(p) for p in parts[2:8]),
                Maneuver.from_label(parts[8]).label, float(parts[9]),
            )
        except (ValueError, KeyError) as e:
            raise ValidationError(f"log line {n}: {e}") from None
        if prev is not None and row.time < prev:
            raise ValidationError(f"log line {n}: time goes backwards")
        prev = row.time
        rows.append(row)
    return rows


def records_from_rows(rows, vehicle: VehicleDefaults = VehicleDefaults()) -> list:
    """StepRecords rebuilt from log rows (states, controls, maneuvers, rewards)."""
    from .commands import Command

    out = []
    i = 0
    while i < len(rows):
        t = rows[i].time
        j = i
        while j < len(rows) and rows[j].time == t:
            j += 1
        grp = rows[i:j]
        agents = tuple(
            AgentState(r.x, r.y, r.heading, r.speed, vehicle.wheelbase, vehicle.half_length, vehicle.half_width,
                       agent_id=r.agent)
            for r in grp
        )
        out.append(StepRecord(
            time=t,
            agents=agents,
            controls=tuple(Control(r.accel, r.steer) for r in grp),
            commands=tuple(Command(Maneuver.from_label(r.maneuver)) for r in grp),
            rewards=tuple(r.reward for r in grp),
        ))
        i = j
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_VERSION = 1
_MAGIC = {RealizerParams: b"HSIM", HighPolicyParams: b"HSHI"}
_HEADER = struct.Struct("<4sIQ")  # magic, version, parameter count


def checkpoint_bytes(params) -> bytes:
    magic = _MAGIC[type(params)]
    flat = np.ascontiguousarray(params.flat, dtype="<f8")
    return _HEADER.pack(magic, CKPT_VERSION, flat.size) + flat.tobytes()


def params_from_bytes(data: bytes, dims=None):
    if len(data) < _HEADER.size:
        raise ValidationError("checkpoint too short")
    magic, version, count = _HEADER.unpack_from(data)
    cls = {m: c for c, m in _MAGIC.items()}.get(magic)
    if cls is None:
        raise ValidationError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if len(data) != _HEADER.size + 8 * count:
        raise ValidationError("checkpoint length does not match its parameter count")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float)
    if dims is None:
        dims = RealizerDims() if cls is RealizerParams else PolicyDims()
    expected = dims.layout().size
    if count != expected:
        raise ValidationError(f"checkpoint holds {count} parameters, dimensions need {expected}")
    return cls(flat, dims)


def save_checkpoint(path: str | Path, params) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path, dims=None):
    return params_from_bytes(Path(path).read_bytes(), dims)
