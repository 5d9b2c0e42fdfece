"""Write the bundled scenarios as scenario files, e.g. as starting points for edits."""

import argparse
from pathlib import Path

from hiersim.io import serialize_scenario
from hiersim.scenario import BUILTIN

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--out", default="scenarios")
args = p.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
for name, make in BUILTIN.items():
    sc = make()
    (out / f"{name}.json").write_text(serialize_scenario(sc))
    print(f"{name}: {len(sc.lanes)} lanes, {len(sc.routes)} routes, {len(sc.spawns)} spawns")
