"""Grouped dispatch vs the per-token loop, and MoE vs dense optimizer-step time."""

import argparse
import json

from ditmoe.bench import bench_dispatch, bench_step_time, format_table
from ditmoe.experiments import TOY_DENSE, TOY_E16A4
from ditmoe.moe_block import ArchConfig

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--configs", nargs="+", default=["E16A4", "E32A8", "E64A8"])
    ap.add_argument("--tokens", type=int, nargs="+", default=[1024, 2048, 4096])
    ap.add_argument("--d-model", type=int, default=16)
    ap.add_argument("--d-expert", type=int, default=8)
    ap.add_argument("--no-naive", action="store_true")
    ap.add_argument("--step-batch", type=int, default=2048)
    args = ap.parse_args()
    archs = [ArchConfig(d_model=args.d_model, n_blocks=1, n_heads=1, ffn=c, d_expert=args.d_expert) for c in args.configs]
    print(format_table(bench_dispatch(archs, args.tokens, naive=not args.no_naive)))
    st = bench_step_time(TOY_E16A4, TOY_DENSE, batch=args.step_batch)
    print(json.dumps({k: st[k] for k in ("ratio", "bound", "within_bound")}))
