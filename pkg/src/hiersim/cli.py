"""Command-line entry point: simulate, cotrain, eval, render, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .closed_loop import cotrain, run_episodes
from .errors import HiersimError, TrainingDivergenceError, ValidationError
from .io import (
    dump_run_config,
    load_checkpoint,
    load_run_config,
    load_scenario,
    read_log,
    records_from_rows,
    save_checkpoint,
    write_log,
)
from .metrics import MetricsAccumulator
from .policy import HighPolicyParams
from .realizer import RealizerParams

EXIT_OK, EXIT_FAIL, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser, scenario: bool = True):
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    if scenario:
        p.add_argument("--scenario", default="intersection", help="bundled name or scenario file")
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--out", default=None, help="output directory")


def _setup(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.episode = dataclasses.replace(cfg.episode, seed=args.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if getattr(args, "hold_k", None) is not None:
        cfg.episode = dataclasses.replace(cfg.episode, hold_k=args.hold_k)
    if getattr(args, "passive", False):
        cfg.episode = dataclasses.replace(cfg.episode, passive=True)
    return cfg


def _params(cfg, high_path=None, low_path=None):
    high_path = high_path or cfg.high_checkpoint
    low_path = low_path or cfg.low_checkpoint
    if high_path:
        high = load_checkpoint(high_path, cfg.policy)
    else:
        high = HighPolicyParams.init(cfg.policy, seed=cfg.seed, maintain_prior=cfg.maintain_prior)
    if low_path:
        low = load_checkpoint(low_path, cfg.realizer)
    else:
        low = RealizerParams.init(cfg.realizer, seed=cfg.seed)
    return high, low


def cmd_simulate(args) -> int:
    cfg = _setup(args)
    if args.controller:
        cfg.episode = dataclasses.replace(cfg.episode, controller=args.controller)
    scenario = load_scenario(args.scenario)
    high, low = _params(cfg, args.high, args.low)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_episodes(cfg.episode, high, low, scenario, range(args.episodes), args.workers)
    acc = MetricsAccumulator(cfg.episode.dt)
    for k, res in enumerate(results):
        (out / f"episode_{k:03d}.log").write_bytes(write_log(res.records))
        acc = acc.merge(res.metrics)
    report = acc.report()
    (out / "metrics.txt").write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_cotrain(args) -> int:
    cfg = _setup(args)
    if args.epochs is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    scenarios = [load_scenario(s) for s in (args.scenario or ["intersection"])]
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    high, low = _params(cfg)
    try:
        high, low, curves = cotrain(cfg.episode, scenarios, cfg.train, high, low, checkpoint_dir=out)
    finally:
        (out / "config.json").write_text(dump_run_config(cfg))
    save_checkpoint(out / "high.ckpt", high)
    save_checkpoint(out / "low.ckpt", low)
    (out / "curves.json").write_text(json.dumps(dataclasses.asdict(curves), indent=2) + "\n")
    h = curves.heldout_loss
    print(f"heldout loss {h[0]:.6g} -> {h[-1]:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    scenario = load_scenario(args.scenario)
    acc = MetricsAccumulator()
    for path in args.logs:
        recs = records_from_rows(read_log(Path(path).read_bytes()), scenario.vehicle)
        acc = acc.merge(MetricsAccumulator().add_all(recs))
    text = acc.report().to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_render(args) -> int:
    from .render import render_frames

    scenario = load_scenario(args.scenario)
    recs = records_from_rows(read_log(Path(args.log).read_bytes()), scenario.vehicle)
    out = Path(args.out or "frames")
    out.mkdir(parents=True, exist_ok=True)
    frames = render_frames(recs, scenario, args.stride)
    for k, svg in enumerate(frames):
        (out / f"frame_{k:04d}.svg").write_text(svg)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_fixture

    cfg = load_run_config(args.config)
    base = args.seed if args.seed is not None else cfg.seed
    lines, ok = [], True
    for k in range(args.fixtures):
        rep = check_fixture(base + k, lambda_s=cfg.train.lambda_s, lambda_c=cfg.train.lambda_c)
        ok &= rep.passed(args.tol)
        lines.append(f"seed={rep.seed} checked={rep.n_checked}/{rep.n_params} "
                     f"max_rel_err={rep.max_rel_err:.3e} {'ok' if rep.passed(args.tol) else 'FAIL'}")
    lines.append("gradcheck " + ("passed" if ok else "failed"))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiersim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run episodes and write logs and metrics")
    _common(s)
    s.add_argument("--hold-k", type=int, default=None, help="re-sample commands every k steps")
    s.add_argument("--passive", action="store_true", help="zero the intention pathway")
    s.add_argument("--episodes", type=int, default=1)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--high", default=None, help="command-policy checkpoint")
    s.add_argument("--low", default=None, help="realizer checkpoint")
    s.add_argument("--controller", choices=("realizer", "expert", "bangbang"), default=None)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("cotrain", help="hybrid co-training; writes checkpoints and curves")
    _common(c, scenario=False)
    c.add_argument("--scenario", action="append", default=None, help="bundled name or scenario file; repeatable")
    c.add_argument("--epochs", type=int, default=None)
    c.set_defaults(func=cmd_cotrain)

    e = sub.add_parser("eval", help="metrics report from logs")
    e.add_argument("logs", nargs="+")
    e.add_argument("--scenario", default="intersection", help="source of vehicle geometry")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="SVG frames from a log")
    r.add_argument("log")
    r.add_argument("--scenario", default="intersection")
    r.add_argument("--out", default=None)
    r.add_argument("--stride", type=int, default=10)
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="finite-difference check of the realizer gradient")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--config", default=None)
    g.add_argument("--fixtures", type=int, default=5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except HiersimError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
