"""Conditional sample accuracy for {weak, rich} encoder x {in-context, cross-attention} injection."""

import argparse
import json
from pathlib import Path

from ditmoe.experiments import run_recipe

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--quick", action="store_true", help="tiny budgets, for a smoke run")
    ap.add_argument("--out", default="runs/injection-2way")
    args = ap.parse_args()
    res = run_recipe("injection-2way", args.seeds, quick=args.quick)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps(res, indent=1, sort_keys=True, default=str))
    print(json.dumps(res["verdict"], indent=1, default=str))
