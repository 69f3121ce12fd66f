"""Timing harnesses, load-balance telemetry and the synthetic routing stream.

Every timed configuration first passes a correctness gate against the naive
per-token oracle. Wall-clock numbers are machine-local measurements.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.stats import spearmanr

from .moe_block import ArchConfig, MoEFFN, activated_param_count, moe_layer_forward, reference_moe_forward
from .numerics import make_rng, normal
from .router import RouterConfig, RouterState, expert_loads, load_stats, route, update_bias

MIN_TRIALS = 30
WARMUPS = 5
MIN_TRIAL_SECONDS = 2e-3


class GateError(AssertionError):
    """Fast path disagreed with the oracle; nothing is timed."""


@dataclass
class TimingStats:
    median: float
    p95: float
    trials: int
    reps: int  # calls per trial (raised automatically for sub-resolution regions)

    @classmethod
    def from_samples(cls, samples: list[float], reps: int) -> "TimingStats":
        return cls(statistics.median(samples), float(np.percentile(samples, 95)), len(samples), reps)


@dataclass
class BenchReport:
    config: str
    n_tokens: int
    tokens_per_second: float
    forward_time: TimingStats
    naive_time: TimingStats | None
    speedup: float | None
    activated_params: int
    total_params: int
    max_over_mean: float | None
    max_abs_error: float
    workers: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def time_callable(fn, trials: int = MIN_TRIALS, warmups: int = WARMUPS, min_seconds: float = MIN_TRIAL_SECONDS):
    """Median/p95 seconds per call over ``trials`` timed trials after ``warmups`` untimed calls.

    When one call is shorter than ``min_seconds`` each trial batches several
    calls and reports the per-call mean.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"at least {MIN_TRIALS} trials are required")
    for _ in range(warmups):
        fn()
    t0 = time.perf_counter()
    fn()
    one = time.perf_counter() - t0
    reps = 1 if one >= min_seconds else int(math.ceil(min_seconds / max(one, 1e-9)))
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        samples.append((time.perf_counter() - t0) / reps)
    return TimingStats.from_samples(samples, reps)


def _bench_layer(cfg: ArchConfig, seed: int) -> MoEFFN:
    layer = MoEFFN(cfg, make_rng(seed, 0xBE7C), torch.float64)
    layer.requires_grad_(False)
    return layer


def correctness_gate(layer: MoEFFN, u: torch.Tensor, atol: float = 1e-12) -> float:
    with torch.no_grad():
        fast = moe_layer_forward(u, layer)
        ref = reference_moe_forward(u, layer)
    err = (fast - ref).abs().max().item() if u.shape[0] else 0.0
    if not err <= atol:
        raise GateError(f"grouped path differs from the oracle by {err:.3e}")
    return err


def bench_dispatch(cfgs, token_counts, seed: int = 0, naive: bool = True, trials: int = MIN_TRIALS,
                   workers: int = 1) -> list[BenchReport]:
    """Route + dispatch + grouped compute + combine vs. the per-token loop, f64."""
    torch.set_num_threads(workers)
    reports = []
    for cfg in cfgs:
        layer = _bench_layer(cfg, seed)
        counts = activated_param_count(cfg)
        for T in token_counts:
            u = normal(make_rng(seed, T), (T, cfg.d_model), 1.0, torch.float64)
            err = correctness_gate(layer, u)
            with torch.no_grad():
                fast = time_callable(lambda: moe_layer_forward(u, layer), trials)
                slow = time_callable(lambda: reference_moe_forward(u, layer), trials) if naive else None
                dec = route(u, layer.router_state, layer.router_cfg)
            reports.append(BenchReport(
                config=cfg.name,
                n_tokens=T,
                tokens_per_second=T / fast.median,
                forward_time=fast,
                naive_time=slow,
                speedup=None if slow is None else slow.median / fast.median,
                activated_params=counts["activated_params"] // cfg.n_blocks,
                total_params=counts["total_params"] // cfg.n_blocks,
                max_over_mean=load_stats(dec, cfg.n_routed)["max_over_mean"] if T else None,
                max_abs_error=err,
                workers=workers,
            ))
    return reports


def format_table(reports: list[BenchReport]) -> str:
    rows = ["config      T      tok/s        median_ms  p95_ms   naive_ms   speedup  max/mean"]
    for r in reports:
        naive = f"{r.naive_time.median * 1e3:9.3f}" if r.naive_time else "        -"
        sp = f"{r.speedup:7.1f}x" if r.speedup else "       -"
        mom = f"{r.max_over_mean:8.2f}" if r.max_over_mean is not None else "       -"
        rows.append(f"{r.config:<10}{r.n_tokens:>6}  {r.tokens_per_second:>11.0f}  {r.forward_time.median * 1e3:9.3f}"
                    f"  {r.forward_time.p95 * 1e3:7.3f}  {naive}  {sp}  {mom}")
    return "\n".join(rows)


# --- optimizer step time -----------------------------------------------------------


def bench_step_time(moe_cfg: ArchConfig, dense_cfg: ArchConfig, batch: int = 2048, trials: int = MIN_TRIALS,
                    seed: int = 0, bound: float = 1.5, data_dim: int = 2) -> dict:
    """Median optimizer-step wall time of a matched MoE/dense pair of flow models."""
    from .flow import FlowModel, ModelConfig, OptimConfig, apply_bias_updates, flow_loss, make_optimizer, set_load_tracking

    a, b = activated_param_count(moe_cfg)["activated_params"], activated_param_count(dense_cfg)["activated_params"]
    if abs(a - b) / max(a, b) >= 0.02:
        raise ValueError(f"activated parameters differ by more than 2% ({a} vs {b})")
    out = {}
    for tag, cfg in (("moe", moe_cfg), ("dense", dense_cfg)):
        model = FlowModel(ModelConfig(arch=cfg, data_dim=data_dim), seed)
        opt = make_optimizer(model, OptimConfig(batch_size=batch))
        rng = make_rng(seed, 0x57E9)
        x0 = normal(rng, (batch, data_dim), 1.0, torch.float32)
        loads = []

        def step():
            set_load_tracking(model, True)
            loss = flow_loss(model, x0, None, rng)
            set_load_tracking(model, False)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            bal = apply_bias_updates(model)
            if bal is not None:
                loads.append(bal["max_over_mean"])

        stats = time_callable(step, trials)
        out[tag] = {
            "config": cfg.name,
            "step_time": asdict(stats),
            "activated_params": activated_param_count(cfg)["activated_params"],
            "load": {"max_over_mean": loads[-1]} if loads else None,
        }
    out["ratio"] = out["moe"]["step_time"]["median"] / out["dense"]["step_time"]["median"]
    out["bound"] = bound
    out["within_bound"] = out["ratio"] <= bound
    return out


# --- balancing stream and telemetry ----------------------------------------------------


@dataclass
class StreamConfig:
    n_routed: int = 16
    top_k: int = 2
    d_model: int = 16
    tokens_per_update: int = 4096
    updates: int = 500
    bias_step: float = 1e-3
    skew: float = 1.5  # token mean = skew * unit centroid of the hot expert
    hot_expert: int = 0


@dataclass
class StreamResult:
    max_over_mean: list[float] = field(default_factory=list)
    selection_entropy: list[float] = field(default_factory=list)
    bias_inf_norm: list[float] = field(default_factory=list)
    biases: list[float] = field(default_factory=list)
    last_decision: object = None  # RoutingDecision of the final update

    def records(self, run_id: str = "route-sim"):
        for i, (m, e, b) in enumerate(zip(self.max_over_mean, self.selection_entropy, self.bias_inf_norm)):
            yield {"run_id": run_id, "step": i, "name": "max_over_mean", "value": m}
            yield {"run_id": run_id, "step": i, "name": "selection_entropy", "value": e}
            yield {"run_id": run_id, "step": i, "name": "bias_inf_norm", "value": b}


def balancing_stream(cfg: StreamConfig, seed: int = 0) -> StreamResult:
    """Iterate route -> loads -> bias update on a token stream skewed toward one expert.

    ``max_over_mean[k]`` is measured on the tokens of update ``k`` before its
    bias step, so index 0 is the unbalanced starting point.
    """
    rng = make_rng(seed, 0x5E1)
    d = cfg.d_model
    centroids = normal(rng, (cfg.n_routed, d), 1.0 / math.sqrt(d), torch.float64)
    hot = centroids[cfg.hot_expert] / centroids[cfg.hot_expert].norm()
    rcfg = RouterConfig(cfg.n_routed, cfg.top_k, d, cfg.bias_step)
    state = RouterState.zeros_bias(centroids)
    res = StreamResult()
    for _ in range(cfg.updates):
        u = normal(rng, (cfg.tokens_per_update, d), 1.0, torch.float64) + cfg.skew * hot
        dec = route(u, state, rcfg)
        loads = expert_loads(dec, cfg.n_routed)
        st = load_stats(loads, cfg.n_routed)
        res.max_over_mean.append(st["max_over_mean"])
        res.selection_entropy.append(st["selection_entropy"])
        state = RouterState(centroids, update_bias(state, loads, rcfg))
        res.bias_inf_norm.append(state.biases.abs().max().item())
    res.biases = state.biases.tolist()
    res.last_decision = dec
    return res


def first_below(series, threshold: float) -> int | None:
    for i, v in enumerate(series):
        if v < threshold:
            return i
    return None


def telemetry_summary(log: list[dict]) -> dict:
    """Trend statistics of a training run's balancing telemetry."""
    def series(name):
        return [r["value"] for r in log if r["name"] == name]

    mom, ent, b = series("max_over_mean"), series("selection_entropy"), series("bias_inf_norm")
    if not mom:
        return {"moe": False}
    rho = spearmanr(np.arange(len(ent)), ent).statistic if len(ent) > 2 and np.std(ent) > 0 else float("nan")
    return {
        "moe": True,
        "initial_max_over_mean": mom[0],
        "final_max_over_mean": mom[-1],
        "entropy_spearman": float(rho),
        "bias_inf_norm_max": max(b),
        "steps": len(mom),
    }
