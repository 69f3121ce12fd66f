import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from ditmoe.numerics import make_rng
from ditmoe.router import (
    RouterConfig,
    RouterState,
    affinity_scores,
    gate_weights,
    load_stats,
    route,
    select_topk,
    update_bias,
)

f64 = torch.float64


def _state(n, d, seed, bias_scale=0.0):
    rng = make_rng(seed)
    return RouterState(
        torch.from_numpy(rng.standard_normal((n, d))),
        torch.from_numpy(rng.standard_normal(n) * bias_scale),
    )


def test_config_rejects_k_above_n():
    with pytest.raises(ValueError):
        RouterConfig(n_routed=2, top_k=3, d_model=4)


def test_affinity_zero_dot_is_half():
    st_ = RouterState(torch.zeros(3, 2, dtype=f64), torch.zeros(3, dtype=f64))
    s = affinity_scores(torch.ones(1, 2, dtype=f64), st_)
    assert torch.all(s == 0.5)


def test_affinity_saturation():
    st_ = RouterState(torch.tensor([[50.0]], dtype=f64), torch.zeros(1, dtype=f64))
    s = affinity_scores(torch.tensor([[1.0]], dtype=f64), st_)
    assert abs(s.item() - 1.0) < 1e-15


def test_affinity_unit_dot():
    st_ = RouterState(torch.tensor([[1.0]], dtype=f64), torch.zeros(1, dtype=f64))
    expected = 1.0 / (1.0 + math.exp(-1.0))  # 0.7310585786...
    assert abs(affinity_scores(torch.tensor([[1.0]], dtype=f64), st_).item() - expected) < 1e-15
    assert abs(expected - 0.731058) < 1e-6


def test_affinity_floor_applies():
    st_ = RouterState(torch.tensor([[-1000.0]], dtype=f64), torch.zeros(1, dtype=f64))
    assert affinity_scores(torch.tensor([[1.0]], dtype=f64), st_, floor=1e-12).item() == 1e-12


def test_affinity_shape_mismatch():
    with pytest.raises(ValueError):
        affinity_scores(torch.ones(2, 3, dtype=f64), _state(4, 2, 0))


def test_select_bias_decides():
    s = torch.tensor([0.3, 0.6], dtype=f64)
    assert select_topk(s, torch.tensor([1.0, 0.0], dtype=f64), 1).tolist() == [0]


def test_select_tie_lowest_index():
    s = torch.tensor([0.5, 0.5], dtype=f64)
    assert select_topk(s, torch.zeros(2, dtype=f64), 1).tolist() == [0]


def test_select_all_when_k_equals_n(rng):
    s = torch.from_numpy(rng.uniform(size=7))
    assert select_topk(s, torch.from_numpy(rng.standard_normal(7)), 7).tolist() == list(range(7))


def test_gate_single_expert_is_one():
    s = torch.tensor([0.01, 0.9], dtype=f64)
    assert gate_weights(s, torch.tensor([0])).tolist() == [1.0]


def test_gate_normalises_raw_affinity():
    s = torch.tensor([0.9, 0.3, 0.6], dtype=f64)
    sel = select_topk(s, torch.zeros(3, dtype=f64), 2)
    assert sel.tolist() == [0, 2]
    g = gate_weights(s, sel)
    assert torch.allclose(g, torch.tensor([0.6, 0.4], dtype=f64), atol=1e-15)


def test_gate_ignores_bias_value():
    s = torch.tensor([0.3, 0.6], dtype=f64)
    sel = select_topk(s, torch.tensor([1.0, 0.0], dtype=f64), 1)
    assert sel.tolist() == [0]
    assert gate_weights(s, sel).tolist() == [1.0]


def test_gate_empty_selection():
    with pytest.raises(ValueError):
        gate_weights(torch.tensor([0.5], dtype=f64), torch.zeros(0, dtype=torch.long))


def test_route_trivial():
    st_ = _state(1, 3, 0)
    d = route(torch.ones(1, 3, dtype=f64), st_, RouterConfig(1, 1, 3))
    assert d.gates.tolist() == [[1.0]]


def test_route_equals_composition():
    rng = make_rng(11)
    u = torch.from_numpy(rng.standard_normal((20, 6)))
    st_ = _state(8, 6, 3, bias_scale=0.2)
    cfg = RouterConfig(8, 2, 6)
    d = route(u, st_, cfg)
    for t in range(20):
        s = affinity_scores(u[t : t + 1], st_)[0]
        sel = select_topk(s, st_.biases, 2)
        assert d.selected[t].tolist() == sel.tolist()
        assert torch.allclose(d.gates[t], gate_weights(s, sel), rtol=0, atol=1e-15)


def test_route_relabeling_symmetry():
    rng = make_rng(5)
    u = torch.from_numpy(rng.standard_normal((30, 4)))
    st_ = _state(6, 4, 9, bias_scale=0.1)
    cfg = RouterConfig(6, 3, 4)
    perm = torch.from_numpy(rng.permutation(6))
    st_p = RouterState(st_.centroids[perm], st_.biases[perm])
    d, dp = route(u, st_, cfg), route(u, st_p, cfg)
    inv = torch.argsort(perm)
    for t in range(30):
        # new index k holds old expert perm[k]
        assert sorted(perm[dp.selected[t]].tolist()) == d.selected[t].tolist()
        assert sorted(dp.gates[t].tolist()) == pytest.approx(sorted(d.gates[t].tolist()), abs=1e-15)
    assert inv.numel() == 6


@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 8), st.integers(0, 10_000))
def test_route_invariants(n, k_raw, T, seed):
    k = min(k_raw, n)
    rng = make_rng(seed)
    st_ = _state(n, 5, seed, bias_scale=0.5)
    d = route(torch.from_numpy(rng.standard_normal((T, 5))), st_, RouterConfig(n, k, 5))
    assert d.selected.shape == (T, k)
    for row in d.selected.tolist():
        assert len(set(row)) == k and row == sorted(row)
    assert torch.all(d.gates > 0)
    assert torch.allclose(d.gates.sum(-1), torch.ones(T, dtype=f64), atol=1e-12)


@given(st.integers(2, 12), st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_monotone_selection(n, seed, delta):
    rng = make_rng(seed)
    s = torch.from_numpy(rng.uniform(size=n))
    b = torch.from_numpy(rng.standard_normal(n) * 0.3)
    k = int(rng.integers(1, n + 1))
    j = int(rng.integers(n))
    before = select_topk(s, b, k).tolist()
    b2 = b.clone()
    b2[j] += delta
    if j in before:
        assert j in select_topk(s, b2, k).tolist()


def test_update_bias_rule():
    cfg = RouterConfig(2, 1, 4, bias_step=0.01)
    b = update_bias(RouterState(torch.zeros(2, 4, dtype=f64), torch.zeros(2, dtype=f64)), [10, 0], cfg)
    assert torch.allclose(b, torch.tensor([-0.01, 0.01], dtype=f64), atol=0)


@given(st.integers(1, 32), st.integers(0, 100))
def test_update_bias_balanced_is_identity(n, load):
    cfg = RouterConfig(n, 1, 2, bias_step=0.3)
    b0 = torch.linspace(-1, 1, n, dtype=f64)
    assert torch.equal(update_bias(RouterState(torch.zeros(n, 2, dtype=f64), b0), [load] * n, cfg), b0)


def test_update_bias_zero_step():
    cfg = RouterConfig(3, 1, 2, bias_step=0.0)
    b0 = torch.tensor([0.1, -0.2, 0.3], dtype=f64)
    assert torch.equal(update_bias(RouterState(torch.zeros(3, 2, dtype=f64), b0), [9, 0, 1], cfg), b0)


def test_load_stats_examples():
    assert load_stats([4, 0, 0, 0], 4)["max_over_mean"] == 4.0
    st_ = load_stats([5, 5, 5, 5], 4)
    assert st_["max_over_mean"] == 1.0
    assert abs(st_["selection_entropy"] - math.log(4)) < 1e-12
    assert load_stats([3, 1, 0, 0], 4)["max_over_mean"] == 3.0


def test_load_stats_zero_tokens():
    with pytest.raises(ValueError):
        load_stats([0, 0], 2)


def test_decision_jsonl_round_trip():
    import json

    st_ = _state(4, 3, 1)
    d = route(torch.from_numpy(make_rng(2).standard_normal((3, 3))), st_, RouterConfig(4, 2, 3))
    rows = [json.loads(l) for l in d.to_jsonl().splitlines()]
    assert [r["token"] for r in rows] == [0, 1, 2]
    assert rows[1]["selected"] == d.selected[1].tolist()
