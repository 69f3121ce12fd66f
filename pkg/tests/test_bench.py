import json
import math

import numpy as np
import pytest
import torch

from ditmoe.bench import (
    MIN_TRIALS,
    GateError,
    StreamConfig,
    balancing_stream,
    bench_dispatch,
    bench_step_time,
    correctness_gate,
    first_below,
    format_table,
    telemetry_summary,
    time_callable,
)
from ditmoe.moe_block import ArchConfig, MoEFFN, moe_layer_forward
from ditmoe.numerics import make_rng, normal

TINY = ArchConfig(d_model=8, n_blocks=1, n_heads=1, ffn="E8A2", d_expert=4)


def test_time_callable_needs_thirty_trials():
    with pytest.raises(ValueError):
        time_callable(lambda: None, trials=MIN_TRIALS - 1)


def test_time_callable_counts_warmups_and_trials():
    calls = []
    stats = time_callable(lambda: calls.append(1), trials=30, warmups=5, min_seconds=0.0)
    # warmups + one probe call + one call per trial
    assert len(calls) == 5 + 1 + 30
    assert stats.trials == 30 and stats.reps == 1
    assert 0 <= stats.median <= stats.p95


def test_time_callable_batches_fast_regions():
    stats = time_callable(lambda: None, trials=30, min_seconds=1e-3)
    assert stats.reps > 1


def test_gate_passes_for_grouped_path():
    layer = MoEFFN(TINY, make_rng(0), torch.float64)
    u = normal(make_rng(1), (64, 8), 1.0, torch.float64)
    assert correctness_gate(layer, u) <= 1e-12


def test_gate_blocks_timing_on_mismatch(monkeypatch):
    import ditmoe.bench as bench

    monkeypatch.setattr(bench, "moe_layer_forward", lambda u, layer: moe_layer_forward(u, layer) + 1e-6)
    with pytest.raises(GateError):
        bench_dispatch([TINY], [32], trials=30)


def test_bench_report_schema():
    reports = bench_dispatch([TINY], [0, 16], trials=30)
    assert [r.n_tokens for r in reports] == [0, 16]
    r = reports[1]
    d = json.loads(r.to_json())
    for key in ("config", "tokens_per_second", "forward_time", "naive_time", "speedup", "activated_params",
                "total_params", "max_over_mean", "max_abs_error", "workers"):
        assert key in d
    assert d["forward_time"]["trials"] == 30
    assert r.activated_params <= r.total_params
    assert "E8A2" in format_table(reports)


def test_stream_without_bias_updates_keeps_biases_zero():
    res = balancing_stream(StreamConfig(updates=20, tokens_per_update=256, bias_step=0.0), seed=3)
    assert res.biases == [0.0] * 16
    assert all(b == 0.0 for b in res.bias_inf_norm)


def test_stream_bias_norm_grows_at_most_gamma_per_update():
    g = 1e-3
    res = balancing_stream(StreamConfig(updates=40, tokens_per_update=256, bias_step=g), seed=0)
    steps = np.diff([0.0] + res.bias_inf_norm)
    assert np.all(steps <= g + 1e-15)


def test_stream_records_schema():
    res = balancing_stream(StreamConfig(updates=3, tokens_per_update=64), seed=0)
    recs = list(res.records("rid"))
    assert len(recs) == 9
    assert {r["name"] for r in recs} == {"max_over_mean", "selection_entropy", "bias_inf_norm"}
    assert all(set(r) == {"run_id", "step", "name", "value"} for r in recs)
    assert res.last_decision.n_tokens == 64


def test_first_below():
    assert first_below([3.0, 2.0, 1.4, 1.2], 1.5) == 2
    assert first_below([3.0, 2.0], 1.5) is None


def test_telemetry_summary_dense_run():
    assert telemetry_summary([{"step": 1, "name": "loss", "value": 1.0}]) == {"moe": False}


def test_telemetry_summary_trend():
    log = []
    for i in range(10):
        log += [{"step": i, "name": "max_over_mean", "value": 3.0 - 0.1 * i},
                {"step": i, "name": "selection_entropy", "value": 1.0 + 0.1 * i},
                {"step": i, "name": "bias_inf_norm", "value": 1e-3 * i}]
    s = telemetry_summary(log)
    assert s["entropy_spearman"] == pytest.approx(1.0)
    assert s["initial_max_over_mean"] == 3.0 and s["final_max_over_mean"] == pytest.approx(2.1)
    assert s["bias_inf_norm_max"] == pytest.approx(9e-3)


def test_step_time_rejects_unmatched_pair():
    dense = ArchConfig(d_model=8, n_blocks=1, n_heads=1, ffn="dense", d_ff=8)
    with pytest.raises(ValueError, match="2%"):
        bench_step_time(TINY, dense, batch=8)


@pytest.mark.slow
def test_step_time_schema():
    from ditmoe.experiments import TOY_DENSE, TOY_E16A4

    out = bench_step_time(TOY_E16A4, TOY_DENSE, batch=64, trials=30)
    assert set(out) == {"moe", "dense", "ratio", "bound", "within_bound"}
    assert out["moe"]["activated_params"] == out["dense"]["activated_params"]
    assert out["moe"]["load"]["max_over_mean"] >= 1.0
    assert out["dense"]["load"] is None
    assert math.isfinite(out["ratio"]) and out["ratio"] > 0
