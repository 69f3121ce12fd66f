"""Command-line runner.

    ditmoe <subcommand> [--config PATH] [--seed N] [--out DIR] [--workers N] [--f64]

Every run writes into its output directory only: ``config.json`` (the
resolved config), ``metrics.jsonl`` (records ``{run_id, step, name, value}``),
subcommand artifacts, and finally ``manifest.json`` listing each file with
its sha256. Failures write ``error.json`` and exit nonzero.

Environment overrides: ``DITMOE_OUT`` (output dir), ``DITMOE_WORKERS``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, config_from_dict, parse_config

SUBCOMMANDS = ("train", "upcycle", "route-sim", "pair-synth", "distill", "bench", "ablate", "report")
MANIFEST = "manifest.json"
# Wall-clock measurements; listed in the manifest but excluded from the reproducibility hash.
VOLATILE = ("bench.jsonl", "bench.txt", "step_time.json")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and (x != x or x in (float("inf"), float("-inf"))):
        return repr(x)
    return x


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")


class Run:
    """Output directory, metrics appender and manifest writer for one invocation."""

    def __init__(self, subcommand: str, cfg: ExperimentConfig):
        self.subcommand = subcommand
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        # the output location is not part of the run's content
        content = {k: v for k, v in cfg.to_dict().items() if k != "out"}
        text = json.dumps(content, indent=1, sort_keys=True) + "\n"
        self.run_id = f"{subcommand}-s{cfg.seed}-{hashlib.sha256(text.encode()).hexdigest()[:12]}"
        self.dtype = torch.float64 if cfg.f64 else torch.float32
        self.volatile = set(VOLATILE)
        (self.out / "config.json").write_text(text)
        self._metrics = open(self.out / "metrics.jsonl", "w")

    def sink(self, rec: dict, prefix: str = "") -> None:
        r = {"run_id": self.run_id, "step": rec["step"], "name": prefix + rec["name"], "value": rec["value"]}
        self._metrics.write(json.dumps(_jsonable(r), sort_keys=True) + "\n")

    def prefixed(self, prefix: str):
        return lambda rec: self.sink(rec, prefix)

    def close(self, status: str) -> dict:
        self._metrics.close()
        files = []
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p.name != MANIFEST:
                from .numerics import file_sha256

                rel = p.relative_to(self.out).as_posix()
                files.append({"path": rel, "sha256": file_sha256(p), "bytes": p.stat().st_size,
                              "volatile": p.name in self.volatile})
        stable = hashlib.sha256("".join(f"{f['path']}:{f['sha256']}\n" for f in files if not f["volatile"]).encode())
        doc = {"run_id": self.run_id, "subcommand": self.subcommand, "status": status, "files": files,
               "content_hash": stable.hexdigest()}
        write_json(self.out / MANIFEST, doc)
        return doc


# --- model builders ---------------------------------------------------------------------------------


def _model_config(cfg: ExperimentConfig, dataset: str):
    from .flow import ModelConfig

    dim = 4 if dataset == "scene" else 2
    card = {"conditional_gmm": (8,), "scene": (8, 4)}.get(dataset, ())
    return ModelConfig(arch=cfg.arch_config(), data_dim=dim, patch=cfg.model.patch, cardinalities=card,
                       encoder=cfg.model.encoder, injection=cfg.model.injection, rich_tokens=cfg.model.rich_tokens)


def _optim(cfg: ExperimentConfig):
    from .flow import OptimConfig

    t = cfg.train
    return OptimConfig(lr=t.lr, weight_decay=t.weight_decay, batch_size=t.batch_size, grad_clip=t.grad_clip)


def _router_overrides(model, cfg: ExperimentConfig):
    for layer in model.moe_layers():
        layer.router_cfg = replace(layer.router_cfg, bias_step=cfg.router.bias_step,
                                   affinity_floor=cfg.router.affinity_floor)


def _train_model(run: Run, dataset: str, steps: int, prefix: str = ""):
    from .bench import telemetry_summary
    from .datasets import make_dataset
    from .flow import EvalBatch, FlowModel, new_train_state, train

    cfg = run.cfg
    model = FlowModel(_model_config(cfg, dataset), cfg.seed, run.dtype)
    _router_overrides(model, cfg)
    data = make_dataset(dataset, cfg.data.n_train, cfg.seed)
    ev = EvalBatch(data, cfg.train.eval_size, cfg.seed + 99, run.dtype)
    st = new_train_state(model, _optim(cfg), cfg.seed)
    train(st, data, steps, _optim(cfg), cfg.train.cond_drop_prob, ev, cfg.train.eval_every, telemetry=True,
          sink=run.prefixed(prefix))
    return st, telemetry_summary(st.log)


# --- subcommands -----------------------------------------------------------------------------------


def cmd_train(run: Run, args) -> dict:
    cfg = run.cfg
    st, tele = _train_model(run, cfg.data.dataset, cfg.train.steps)
    st.save(run.out / "checkpoint")
    _, ev = st.series("eval_loss")
    summary = {"dataset": cfg.data.dataset, "arch": cfg.arch.ffn, "steps": st.step,
               "final_eval_loss": ev[-1] if ev else None, "telemetry": tele,
               "params": st.model.param_counts()}
    write_json(run.out / "summary.json", summary)
    return summary


def cmd_upcycle(run: Run, args) -> dict:
    from .flow import FlowModel
    from .numerics import save_container
    from .upcycle import DenseCheckpoint, UpcycleConfig, UpcycleError, upcycle

    cfg = run.cfg
    u = cfg.upcycle
    dense = None
    if u.strategy != "from_scratch":
        if not u.dense_checkpoint:
            raise UpcycleError("upcycle.dense_checkpoint is required for strategy " + repr(u.strategy))
        dense = DenseCheckpoint.load(u.dense_checkpoint)
    model = FlowModel(_model_config(cfg, cfg.data.dataset), cfg.seed, run.dtype)
    arch = model.cfg.arch
    if not arch.is_moe:
        raise UpcycleError("arch.ffn must be an E<N>A<K> config for upcycling")
    report = upcycle(dense, UpcycleConfig(arch.n_routed, arch.d_expert, u.base_seed, u.strategy, u.drop_ratio, u.sampler),
                     model)
    save_container(run.out / "moe_checkpoint", {f"model/{k}": v for k, v in model.state_dict().items()},
                   {"kind": "moe", "arch": arch.name, "strategy": u.strategy})
    write_json(run.out / "coverage_report.json", report)
    for b in report["blocks"]:
        run.sink({"step": 0, "name": f"coverage/block{b['block']}", "value": b["coverage"]})
    return report


def cmd_route_sim(run: Run, args) -> dict:
    from .experiments import verdict_route_sim
    from .bench import StreamConfig, balancing_stream, first_below

    cfg = run.cfg
    rs = asdict(cfg.route_sim)
    gammas = rs.pop("bias_steps")
    out = {}
    for g in gammas:
        res = balancing_stream(StreamConfig(bias_step=g, **rs), cfg.seed)
        tag = f"gamma_{g:g}"
        with open(run.out / f"telemetry_{tag}.jsonl", "w") as fh:
            for rec in res.records(run.run_id):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (run.out / f"decisions_{tag}.jsonl").write_text(res.last_decision.to_jsonl())
        out[str(g)] = {"max_over_mean": res.max_over_mean, "first_below_1.5": first_below(res.max_over_mean, 1.5),
                       "final_max_over_mean": res.max_over_mean[-1], "bias_inf_norm": res.bias_inf_norm[-1]}
    summary = {k: {kk: vv for kk, vv in v.items() if kk != "max_over_mean"} for k, v in out.items()}
    if any(float(k) == 0 for k in out) and any(float(k) > 0 for k in out):
        summary["verdict"] = verdict_route_sim(out)
    write_json(run.out / "summary.json", summary)
    return summary


def cmd_pair_synth(run: Run, args) -> dict:
    from .flow import FlowConfig
    from .paired_synth import enumerate_specs, synth_dataset

    cfg = run.cfg
    p = cfg.paired
    st, _ = _train_model(run, "scene", cfg.train.steps, prefix="train/")
    specs = []
    for f in p.shared_fractions:
        specs += enumerate_specs(p.n_specs, int(round(f * p.n_steps)), cfg.seed)
    inf = float("inf")
    records, summary = synth_dataset(st.model, specs, FlowConfig(p.n_steps, cfg_scale=p.cfg_scale), run.out / "pairs",
                                     p.max_inconsistency if p.max_inconsistency is not None else inf,
                                     p.max_quality if p.max_quality is not None else inf)
    for S, v in summary["median_consistency"].items():
        run.sink({"step": int(S), "name": "median_consistency", "value": v})
    return summary


def cmd_distill(run: Run, args) -> dict:
    from .datasets import make_dataset
    from .flow import EvalBatch, FlowModel, new_train_state, train
    from .post_train import joint_train, make_distill_state

    cfg = run.cfg
    j = cfg.joint
    jcfg = cfg.joint_config()
    teacher = FlowModel(_model_config(cfg, j.dataset), cfg.seed, run.dtype)
    _router_overrides(teacher, cfg)
    st = new_train_state(teacher, _optim(cfg), cfg.seed)
    train(st, make_dataset(j.dataset, cfg.data.n_train, cfg.seed), j.teacher_train_steps, _optim(cfg), 0.1,
          sink=run.prefixed("teacher/"))
    state = make_distill_state(teacher, jcfg, cfg.seed)
    h = state.teacher_hash()
    joint_train(state, jcfg, cfg.reward_spec(), j.steps, dataset=j.dataset, use_nft=j.use_nft,
                sink=run.sink, eval_seed=cfg.seed)
    from .experiments import reward_crossing
    from .numerics import save_container

    save_container(run.out / "student", {f"model/{k}": v for k, v in state.student.state_dict().items()},
                   {"kind": "student", "steps": state.step})
    s, v = state.series("student_reward")
    _, ref = state.series("teacher_reward_ref")
    summary = {"steps": state.step, "final_student_reward": v[-1], "teacher_reward_ref": ref[0],
               "crossing_step": reward_crossing(s, v, ref[0]), "teacher_hash_unchanged": state.teacher_hash() == h}
    write_json(run.out / "summary.json", summary)
    return summary


def cmd_bench(run: Run, args) -> dict:
    from .bench import GateError, bench_dispatch, bench_step_time, format_table
    from .moe_block import ArchConfig

    cfg = run.cfg
    b = cfg.bench
    archs = [ArchConfig(d_model=b.d_model, n_blocks=1, n_heads=1, ffn=c, d_expert=b.d_expert) for c in b.configs]
    try:
        reports = bench_dispatch(archs, b.token_counts, cfg.seed, b.naive, b.trials, cfg.workers)
    except GateError as exc:
        write_json(run.out / "gate.json", {"passed": False, "error": str(exc)})
        raise
    write_json(run.out / "gate.json", {"passed": True, "checked": [[r.config, r.n_tokens, r.max_abs_error] for r in reports]})
    with open(run.out / "bench.jsonl", "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    (run.out / "bench.txt").write_text(format_table(reports) + "\n")
    summary = {"gate": "passed", "n_configs": len(reports)}
    at = [r.speedup for r in reports if r.n_tokens == 4096 and r.speedup is not None]
    if at:
        run.volatile.add("verdict.json")
        write_json(run.out / "verdict.json", {"criterion": 12, "passed": min(at) >= 1.5,
                                              "detail": {"speedup_at_4096": at}})
    if b.step_time:
        from .experiments import TOY_DENSE, TOY_E16A4

        st = bench_step_time(TOY_E16A4, TOY_DENSE, b.step_batch, b.trials, cfg.seed)
        write_json(run.out / "step_time.json", st)
    write_json(run.out / "summary.json", summary)
    return summary


def cmd_ablate(run: Run, args) -> dict:
    from .experiments import run_recipe

    cfg = run.cfg
    recipe = args.recipe or cfg.ablate.recipe
    seeds = [cfg.seed] if args.seed is not None else cfg.ablate.seeds
    res = run_recipe(recipe, seeds, quick=args.quick or cfg.ablate.quick)
    write_json(run.out / "results.json", res)
    write_json(run.out / "verdict.json", res["verdict"])
    lines = [f"recipe {recipe}  seeds {seeds}", ""]
    for r in res["results"]:
        if "steps_to_target" in r:
            order = sorted(r["steps_to_target"].items(), key=lambda kv: float("inf") if kv[1] is None else kv[1])
            lines.append(f"seed {r['seed']}: " + "  ".join(f"{k}={v}" for k, v in order))
    lines.append(f"criterion {res['verdict']['criterion']}: {'PASS' if res['verdict']['passed'] else 'FAIL'}")
    (run.out / "table.txt").write_text("\n".join(lines) + "\n")
    return res["verdict"]


def build_report(root) -> str:
    """Markdown summary of every run under ``root`` plus the criteria checklist."""
    from .experiments import CRITERIA

    root = Path(root)
    manifests = sorted(root.rglob(MANIFEST)) if root.is_dir() else []
    lines = ["# Run report", ""]
    if not manifests:
        lines += ["no runs", ""]
    verdicts: dict[int, list] = {}
    for m in manifests:
        doc = json.loads(m.read_text())
        rel = m.parent.relative_to(root).as_posix() or "."
        flag = "" if doc.get("status") == "ok" else "  (INCOMPLETE)"
        lines += [f"## {rel}: {doc.get('subcommand')}{flag}", "",
                  f"- run_id: {doc.get('run_id')}", f"- files: {len(doc.get('files', []))}",
                  f"- content_hash: {doc.get('content_hash')}", ""]
        for name in ("verdict.json", "summary.json"):
            p = m.parent / name
            if p.exists():
                v = json.loads(p.read_text())
                v = v.get("verdict", v) if name == "summary.json" else v
                if isinstance(v, dict) and "criterion" in v:
                    verdicts.setdefault(int(v["criterion"]), []).append((rel, bool(v["passed"])))
    by_id: dict[str, set] = {}
    for m in manifests:
        doc = json.loads(m.read_text())
        if doc.get("status") == "ok":
            by_id.setdefault(doc["run_id"], set()).add(doc["content_hash"])
    repeated = {k: v for k, v in by_id.items() if _count(manifests, k) > 1}
    if repeated:
        verdicts[13] = [(f"{len(repeated)} repeated run ids", all(len(v) == 1 for v in repeated.values()))]
    if manifests:
        lines += ["## Acceptance checklist", ""]
        for n, title in CRITERIA.items():
            got = verdicts.get(n)
            if not got:
                mark = "not run"
            else:
                mark = "PASS" if all(ok for _, ok in got) else "FAIL"
                mark += " (" + ", ".join(rel for rel, _ in got) + ")"
            lines.append(f"- [{n}] {title}: {mark}")
        lines.append("")
    return "\n".join(lines)


def _count(manifests, run_id) -> int:
    return sum(json.loads(m.read_text()).get("run_id") == run_id for m in manifests)


COMMANDS = {
    "train": cmd_train,
    "upcycle": cmd_upcycle,
    "route-sim": cmd_route_sim,
    "pair-synth": cmd_pair_synth,
    "distill": cmd_distill,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


# --- argument handling -------------------------------------------------------------------------------


def _joint_flags(p):
    from .config import JointSection

    for f in fields(JointSection):
        if f.name == "rewards":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f"joint_{f.name}", action=argparse.BooleanOptionalAction, default=None)
        else:
            kind = {"int": int, "float": float, "str": str}.get(str(f.type), str)
            p.add_argument(flag, dest=f"joint_{f.name}", type=kind, default=None)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; defaults apply when omitted")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--f64", action="store_true", default=None)
    ap = argparse.ArgumentParser(prog="ditmoe", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ablate":
            p.add_argument("recipe", nargs="?", default=None)
            p.add_argument("--quick", action="store_true", help="shrunken budgets for smoke runs")
        if name == "distill":
            _joint_flags(p)
    rp = sub.add_parser("report")
    rp.add_argument("path", help="directory holding one or more runs")
    rp.add_argument("--out", default=None, help="write the report here instead of <path>/report.md")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else config_from_dict({})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    out = args.out or os.environ.get("DITMOE_OUT")
    if out:
        over["out"] = out
    workers = args.workers or (int(os.environ["DITMOE_WORKERS"]) if os.environ.get("DITMOE_WORKERS") else None)
    if workers:
        over["workers"] = workers
    if args.f64:
        over["f64"] = True
    data = {**cfg.to_dict(), **over}
    if args.cmd == "distill":
        for k in list(vars(args)):
            if k.startswith("joint_") and getattr(args, k) is not None:
                data["joint"][k[6:]] = getattr(args, k)
    if args.cmd == "ablate" and args.recipe:
        data["ablate"]["recipe"] = args.recipe
    return config_from_dict(data)


def _fail(exc: BaseException, cmd: str, out: Path | None) -> int:
    record = {"event": "error", "subcommand": cmd, "type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["errors"] = exc.errors
    elif not isinstance(exc, (ValueError, KeyError, FileNotFoundError)):
        record["traceback"] = traceback.format_exc(limit=5)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "error.json", record)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return 2 if isinstance(exc, ConfigError) else 1


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.cmd == "report":
        text = build_report(args.path)
        dest = Path(args.out) if args.out else Path(args.path) / "report.md"
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(text)
        print(text)
        return 0
    try:
        cfg = resolve_config(args)
    except Exception as exc:  # noqa: BLE001
        return _fail(exc, args.cmd, None)
    from .numerics import set_workers

    set_workers(cfg.workers)
    torch.manual_seed(cfg.seed)
    run = Run(args.cmd, cfg)
    try:
        result = COMMANDS[args.cmd](run, args)
    except Exception as exc:  # noqa: BLE001
        code = _fail(exc, args.cmd, run.out)
        run.close("error")
        return code
    doc = run.close("ok")
    print(json.dumps({"run_id": run.run_id, "out": str(run.out), "content_hash": doc["content_hash"],
                      "result": _jsonable(result) if isinstance(result, dict) and len(json.dumps(_jsonable(result))) < 2000 else "see out dir"},
                     sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
