"""Command hold length k versus safety and smoothness for a trained pair."""

import argparse
from dataclasses import replace
from pathlib import Path

from hiersim.closed_loop import evaluate
from hiersim.experiments import EVAL_EPISODE
from hiersim.io import load_checkpoint
from hiersim.scenario import intersection

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("run", help="directory holding high.ckpt and low.ckpt")
p.add_argument("--episodes", type=int, default=10)
p.add_argument("--holds", type=int, nargs="+", default=[1, 5, 10, 20])
args = p.parse_args()

run = Path(args.run)
high, low = load_checkpoint(run / "high.ckpt"), load_checkpoint(run / "low.ckpt")
print(f"{'hold_k':>6} {'coll/km':>8} {'flags/km':>9} {'hardacc/km':>11}")
for k in args.holds:
    r = evaluate(replace(EVAL_EPISODE, hold_k=k), high, low, intersection(), args.episodes)
    print(f"{k:6d} {r.collision_per_km:8.3f} {r.safety_flag_per_km:9.3f} {r.hard_accel_per_km:11.2f}", flush=True)
