"""Co-train both levels on the 8-agent intersection and save checkpoints and curves."""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from hiersim.closed_loop import TrainConfig
from hiersim.experiments import train_intersection
from hiersim.io import save_checkpoint

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--out", default="runs/intersection")
p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

out = Path(args.out)
pair = train_intersection(TrainConfig(epochs=args.epochs, seed=args.seed), checkpoint_dir=out)
save_checkpoint(out / "high.ckpt", pair.high)
save_checkpoint(out / "low.ckpt", pair.low)
(out / "curves.json").write_text(json.dumps(dataclasses.asdict(pair.curves), indent=2) + "\n")
h = pair.curves.heldout_loss
print(f"trained in {pair.seconds:.0f} s; held-out loss {h[0]:.4g} -> {h[-1]:.4g} ({100 * pair.heldout_drop:.1f}% drop)")
