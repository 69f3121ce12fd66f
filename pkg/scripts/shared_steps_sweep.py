"""Pair consistency as a function of the number of shared early denoising steps."""

import argparse
import json
from pathlib import Path

from ditmoe.experiments import run_recipe

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20, help="number of spec seeds")
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--out", default="runs/shared-steps-sweep")
    args = ap.parse_args()
    res = run_recipe("shared-steps-sweep", range(args.seeds), quick=args.quick)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps(res, indent=1, sort_keys=True, default=str))
    for S in res["results"][0]["S"]:
        print(f"S={S:3d}  median consistency {res['results'][0]['median_consistency'][S]:.5f}")
    print("PASS" if res["verdict"]["passed"] else "FAIL")
