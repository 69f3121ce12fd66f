import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from ditmoe.moe_block import (
    ArchConfig,
    DenseFFN,
    DiTBlock,
    ExpertWeights,
    MoEFFN,
    activated_param_count,
    combine,
    dense_ffn_forward,
    dispatch,
    dit_block_forward,
    expert_ffn,
    ffn_flops,
    ffn_param_count,
    grouped_expert_compute,
    moe_layer_forward,
    reference_moe_forward,
    unpermute,
)
from ditmoe.numerics import make_rng, set_workers
from ditmoe.router import RoutingDecision, route

f64 = torch.float64


def make_layer(d, n, k, n_shared=1, d_e=4, seed=0, bias_scale=0.1, activation="gelu"):
    cfg = ArchConfig(d_model=d, n_heads=1, ffn=f"E{n}A{k}", d_expert=d_e, n_shared=n_shared, activation=activation)
    layer = MoEFFN(cfg, make_rng(seed), f64)
    with torch.no_grad():
        layer.biases.copy_(torch.from_numpy(make_rng(seed, 1).standard_normal(n) * bias_scale))
    return layer


def test_expert_ffn_zero_weights():
    e = ExpertWeights(torch.zeros(3, 2, dtype=f64), torch.zeros(2, 3, dtype=f64), "gelu")
    assert torch.equal(expert_ffn(torch.ones(4, 3, dtype=f64), e), torch.zeros(4, 3, dtype=f64))


def test_expert_ffn_scalar_identity():
    e = ExpertWeights(torch.tensor([[1.0]], dtype=f64), torch.tensor([[1.0]], dtype=f64), "identity")
    assert expert_ffn(torch.tensor([[2.0]], dtype=f64), e).tolist() == [[2.0]]


def test_expert_ffn_matches_matmuls(rng):
    x = torch.from_numpy(rng.standard_normal((3, 4)))
    up, down = torch.from_numpy(rng.standard_normal((4, 2))), torch.from_numpy(rng.standard_normal((2, 4)))
    expect = np.maximum(x.numpy() @ up.numpy(), 0) @ down.numpy()
    out = expert_ffn(x, ExpertWeights(up, down, "relu")).numpy()
    assert np.allclose(out, expect, atol=1e-14)


def test_expert_ffn_shape_mismatch():
    e = ExpertWeights(torch.zeros(3, 2, dtype=f64), torch.zeros(2, 3, dtype=f64), "gelu")
    with pytest.raises(ValueError):
        expert_ffn(torch.ones(4, 5, dtype=f64), e)


def _decision(selected, gates=None):
    sel = torch.tensor(selected)
    g = torch.full(sel.shape, 1.0 / sel.shape[1], dtype=f64) if gates is None else torch.tensor(gates, dtype=f64)
    return RoutingDecision(sel, torch.zeros(sel.shape[0], 3, dtype=f64), g)


def test_dispatch_single_token():
    x = torch.tensor([[1.5, -2.0]], dtype=f64)
    buf, plan = dispatch(x, _decision([[0]]), 1)
    assert torch.equal(buf, x) and plan.order.tolist() == [0]


def test_dispatch_segments():
    x = torch.tensor([[1.0], [2.0]], dtype=f64)
    buf, plan = dispatch(x, _decision([[0, 1], [0, 2]]), 3)
    assert plan.counts.tolist() == [2, 1, 1]
    assert buf[:, 0].tolist() == [1.0, 2.0, 1.0, 2.0]
    assert plan.tokens.tolist() == [0, 1, 0, 1]


def test_dispatch_inconsistent_decision():
    with pytest.raises(ValueError):
        dispatch(torch.zeros(3, 2, dtype=f64), _decision([[0], [1]]), 2)
    with pytest.raises(ValueError):
        dispatch(torch.zeros(1, 2, dtype=f64), _decision([[5]]), 2)


@pytest.mark.parametrize("seed", range(100))
def test_dispatch_round_trip_exact(seed):
    rng = make_rng(seed)
    T, n = int(rng.integers(1, 40)), int(rng.integers(1, 12))
    k = int(rng.integers(1, n + 1))
    sel = np.sort(np.stack([rng.choice(n, k, replace=False) for _ in range(T)]), 1)
    x = torch.from_numpy(rng.standard_normal((T, 5)))
    buf, plan = dispatch(x, _decision(sel.tolist()), n)
    back = unpermute(buf, plan).reshape(T, k, 5)
    for j in range(k):
        assert torch.equal(back[:, j], x)
    assert sorted(plan.order.tolist()) == list(range(T * k))
    assert int(plan.counts.sum()) == T * k


def test_combine_single_slot():
    y = torch.tensor([[3.0, 4.0]], dtype=f64)
    _, plan = dispatch(torch.zeros(1, 2, dtype=f64), _decision([[0]], [[1.0]]), 1)
    assert torch.equal(combine(y, plan), y)


def test_combine_convex_point():
    y = torch.tensor([[3.0], [3.0]], dtype=f64)
    _, plan = dispatch(torch.zeros(1, 1, dtype=f64), _decision([[0, 1]], [[0.6, 0.4]]), 2)
    assert combine(y, plan).item() == pytest.approx(3.0, abs=1e-15)


def test_combine_misaligned():
    _, plan = dispatch(torch.zeros(2, 1, dtype=f64), _decision([[0], [1]]), 2)
    with pytest.raises(ValueError):
        combine(torch.zeros(3, 1, dtype=f64), plan)


def test_combine_matches_loop(rng):
    layer = make_layer(6, 8, 3, n_shared=0)
    u = torch.from_numpy(rng.standard_normal((10, 6)))
    d = route(u, layer.router_state, layer.router_cfg)
    buf, plan = dispatch(u, d, 8)
    y = combine(grouped_expert_compute(buf, plan, layer.routed_up, layer.routed_down, "gelu"), plan, d.gates)
    for t in range(10):
        ref = sum(d.gates[t, s] * expert_ffn(u[t : t + 1], layer.expert(int(j)))[0] for s, j in enumerate(d.selected[t]))
        assert torch.allclose(y[t], ref, atol=1e-12, rtol=0)


def test_layer_zero_weights_identity(rng):
    layer = make_layer(5, 4, 2)
    with torch.no_grad():
        for p in (layer.shared_up, layer.shared_down, layer.routed_up, layer.routed_down):
            p.zero_()
    u = torch.from_numpy(rng.standard_normal((7, 5)))
    assert torch.equal(moe_layer_forward(u, layer), u)


def test_layer_single_expert_gate_one(rng):
    layer = make_layer(4, 1, 1, n_shared=0)
    u = torch.from_numpy(rng.standard_normal((5, 4)))
    assert torch.allclose(moe_layer_forward(u, layer), u + expert_ffn(u, layer.expert(0)), atol=1e-15, rtol=0)


def test_reference_hand_computed_two_experts():
    layer = make_layer(1, 2, 2, n_shared=0, d_e=1, activation="identity", bias_scale=0.0)
    with torch.no_grad():
        layer.centroids.copy_(torch.tensor([[1.0], [-1.0]]))
        layer.routed_up.copy_(torch.tensor([[[2.0]], [[3.0]]]))
        layer.routed_down.fill_(1.0)
    u = torch.tensor([[1.0]], dtype=f64)
    # 1 + 2 a + 3 (1 - a) with a = sigmoid(1)
    assert reference_moe_forward(u, layer).item() == pytest.approx(3.2689414213699951, abs=1e-15)
    assert moe_layer_forward(u, layer).item() == pytest.approx(3.2689414213699951, abs=1e-15)


def test_reference_empty_tokens():
    layer = make_layer(3, 4, 2)
    u = torch.zeros(0, 3, dtype=f64)
    assert reference_moe_forward(u, layer).shape == (0, 3)
    assert moe_layer_forward(u, layer).shape == (0, 3)


def test_layer_matches_reference_fixed_config(rng):
    layer = make_layer(8, 8, 3, n_shared=1)
    u = torch.from_numpy(rng.standard_normal((16, 8)))
    assert torch.allclose(moe_layer_forward(u, layer), reference_moe_forward(u, layer), atol=1e-12, rtol=0)


@given(st.integers(1, 16), st.integers(1, 32), st.integers(1, 8), st.integers(0, 2), st.integers(0, 10**6))
def test_layer_matches_reference_property(d, n, k_raw, n_shared, seed):
    k = min(k_raw, n)
    layer = make_layer(d, n, k, n_shared=n_shared, d_e=3, seed=seed)
    u = torch.from_numpy(make_rng(seed, 2).standard_normal((6, d)))
    assert torch.allclose(moe_layer_forward(u, layer), reference_moe_forward(u, layer), atol=1e-12, rtol=0)


def test_layer_gradients_match_fd():
    from ditmoe.numerics import finite_difference_gradient, relative_error

    layer = make_layer(4, 6, 2, d_e=3, seed=3)
    u = torch.from_numpy(make_rng(9).standard_normal((5, 4)))
    names = ["shared_up", "routed_up", "routed_down", "centroids"]
    decision = route(u, layer.router_state, layer.router_cfg)
    for name in names:
        p = getattr(layer, name)
        layer.zero_grad()
        moe_layer_forward(u, layer).pow(2).sum().backward()
        analytic = p.grad.clone()

        def f(v, p=p):
            with torch.no_grad():
                old = p.detach().clone()
                p.copy_(v)
                out = moe_layer_forward(u, layer).pow(2).sum().item()
                same = torch.equal(route(u, layer.router_state, layer.router_cfg).selected, decision.selected)
                p.copy_(old)
            assert same, "probe crossed a routing boundary"
            return out

        fd = finite_difference_gradient(f, p.detach().clone(), 1e-6)
        assert relative_error(analytic, fd) < 1e-4, name


def test_biases_get_no_gradient():
    layer = make_layer(4, 6, 2)
    moe_layer_forward(torch.ones(3, 4, dtype=f64), layer).sum().backward()
    assert not layer.biases.requires_grad
    assert layer.centroids.grad is not None


def test_dense_zero_identity_and_expert_equivalence(rng):
    dense = DenseFFN(5, 7, rng=make_rng(1), dtype=f64)
    u = torch.from_numpy(rng.standard_normal((3, 5)))
    assert torch.equal(dense_ffn_forward(u, dense), u + expert_ffn(u, dense.as_expert()))
    expect = u.numpy() + torch.nn.functional.gelu(u @ dense.w_up).detach().numpy() @ dense.w_down.detach().numpy()
    assert np.allclose(dense_ffn_forward(u, dense).detach().numpy(), expect, atol=1e-13)
    with torch.no_grad():
        dense.w_up.zero_()
    assert torch.equal(dense_ffn_forward(u, dense), u)


def test_workers_do_not_change_output(rng):
    layer = make_layer(6, 8, 3)
    u = torch.from_numpy(rng.standard_normal((20, 6)))
    set_workers(1)
    a = moe_layer_forward(u, layer)
    set_workers(4)
    b = moe_layer_forward(u, layer)
    set_workers(1)
    assert torch.equal(a, b)


def _block(cross=False, seed=0, ffn="E4A2"):
    cfg = ArchConfig(d_model=8, n_heads=2, ffn=ffn, d_expert=4, cross_attention=cross)
    return DiTBlock(cfg, make_rng(seed), f64)


def _randomize(block, seed):
    rng = make_rng(seed, 77)
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.from_numpy(rng.standard_normal(tuple(p.shape)) * 0.3))


def test_block_zero_weights_identity(rng):
    b = _block()
    with torch.no_grad():
        for name, p in b.named_parameters():
            if not name.startswith("norm"):
                p.zero_()
    seq = torch.from_numpy(rng.standard_normal((5, 8)))
    assert torch.equal(dit_block_forward(seq, b, torch.zeros(8, dtype=f64)), seq)


def test_block_single_token_closed_form(rng):
    b = _block(ffn="dense")
    _randomize(b, 1)
    with torch.no_grad():
        b.ffn.w_up.zero_()
    x = torch.from_numpy(rng.standard_normal((1, 8)))
    te = torch.from_numpy(rng.standard_normal(8))
    mod = te @ b.mod_w + b.mod_b
    shift, scale, gate = mod[:8], mod[8:16], mod[16:24]
    z = torch.nn.functional.layer_norm(x, (8,), b.norm1.weight, b.norm1.bias) * (1 + scale) + shift
    # softmax over one key is 1, so attention is the value path
    expect = x + (1 + gate) * (z @ b.wv @ b.wo)
    out = dit_block_forward(x, b, te)
    assert torch.allclose(out, expect, atol=1e-12, rtol=0)


def test_block_permutation_equivariant(rng):
    b = _block()
    _randomize(b, 2)
    seq = torch.from_numpy(rng.standard_normal((6, 8)))
    te = torch.from_numpy(rng.standard_normal(8))
    perm = torch.from_numpy(rng.permutation(6))
    assert torch.allclose(dit_block_forward(seq[perm], b, te), dit_block_forward(seq, b, te)[perm], atol=1e-12)


def test_param_counts_formulae():
    cfg = ArchConfig(d_model=32, ffn="E16A4", d_expert=16, d_shared=64)
    total, active = ffn_param_count(cfg)
    assert active == 8704
    assert total == 2 * 32 * 64 + 16 * 2 * 32 * 16 + 16 * 32
    assert ffn_param_count(ArchConfig(d_model=32, ffn="dense", d_ff=136)) == (8704, 8704)
    assert ffn_param_count(ArchConfig(d_model=32, ffn="E32A8", d_expert=8, d_shared=56))[1] == 8704


def test_param_counts_n_equals_k():
    cfg = ArchConfig(d_model=16, ffn="E4A4", d_expert=8)
    total, active = ffn_param_count(cfg)
    assert total == active


@given(st.integers(1, 8), st.integers(1, 4))
def test_routed_activated_independent_of_n(k, mult):
    a = ArchConfig(d_model=8, n_heads=1, ffn=f"E{k * mult}A{k}", d_expert=4)
    b = ArchConfig(d_model=8, n_heads=1, ffn=f"E{2 * k * mult}A{k}", d_expert=4)
    routed = lambda c: ffn_param_count(c)[1] - c.n_routed * c.d_model
    assert routed(a) == routed(b)


def test_matched_coarse_and_fine_configs():
    dense = activated_param_count(ArchConfig(d_model=32, ffn="dense", d_ff=136))["activated_params"]
    for c in (ArchConfig(d_model=32, ffn="E16A4", d_expert=16, d_shared=64),
              ArchConfig(d_model=32, ffn="E32A8", d_expert=8, d_shared=56)):
        assert abs(activated_param_count(c)["activated_params"] - dense) / dense < 0.02


def test_flops_scale_with_activated_width():
    a = ArchConfig(d_model=16, ffn="E8A2", d_expert=8)
    b = ArchConfig(d_model=16, ffn="E64A2", d_expert=8)
    # only the router term grows with N_r
    assert ffn_flops(b, 100) - ffn_flops(a, 100) == 2 * 100 * 16 * (64 - 8)


def test_arch_rejects_k_above_n():
    with pytest.raises(ValueError):
        ArchConfig(ffn="E4A8")
