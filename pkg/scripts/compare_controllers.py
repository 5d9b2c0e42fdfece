"""Evaluate trained, passive, untrained-realizer, bang-bang and expert execution
over the fixed evaluation seeds and print the per-km table."""

import argparse
from pathlib import Path

from hiersim.experiments import EVAL_EPISODES, VARIANTS, TrainedPair, compare
from hiersim.io import load_checkpoint

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("run", help="directory holding high.ckpt and low.ckpt")
p.add_argument("--episodes", type=int, default=EVAL_EPISODES)
p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
args = p.parse_args()

run = Path(args.run)
pair = TrainedPair(load_checkpoint(run / "high.ckpt"), load_checkpoint(run / "low.ckpt"), None, 0.0)
res = compare(pair, args.variants, args.episodes, on_row=lambda name, r: print(f"{name} done", flush=True))
text = res.table()
(run / "comparison.txt").write_text(text)
print(text, end="")
