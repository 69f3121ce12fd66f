"""DiT-MoE block: shared + routed expert FFNs behind a dispatch/combine path.

Routed experts are stored stacked (``[N_r, d_model, d_e]`` / ``[N_r, d_e,
d_model]``) so the grouped compute can walk contiguous expert segments of a
permuted token buffer, the way a grouped-GEMM kernel would.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import make_rng, normal
from .router import RouterConfig, RouterState, RoutingDecision, expert_loads, route

ACTIVATIONS = {
    "gelu": F.gelu,
    "silu": F.silu,
    "relu": F.relu,
    "identity": lambda x: x,
}


@dataclass
class ExpertWeights:
    w_up: torch.Tensor  # [d_model, d_e]
    w_down: torch.Tensor  # [d_e, d_model]
    activation: str = "gelu"

    @property
    def width(self) -> int:
        return self.w_up.shape[1]


def expert_ffn(x: torch.Tensor, e: ExpertWeights) -> torch.Tensor:
    if x.shape[-1] != e.w_up.shape[0] or e.w_up.shape[1] != e.w_down.shape[0]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, up {tuple(e.w_up.shape)}, down {tuple(e.w_down.shape)}")
    return ACTIVATIONS[e.activation](x @ e.w_up) @ e.w_down


# --- architecture bookkeeping ---------------------------------------------

_MOE_NAME = re.compile(r"^E(\d+)A(\d+)$")


@dataclass
class ArchConfig:
    """Geometry of the DiT stack. ``ffn`` is ``"E{N_r}A{K_r}"`` or ``"dense"``."""

    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    ffn: str = "E16A4"
    d_expert: int = 32
    n_shared: int = 1
    d_shared: int | None = None
    d_ff: int = 256
    activation: str = "gelu"
    cross_attention: bool = False

    def __post_init__(self):
        if self.ffn != "dense":
            m = _MOE_NAME.match(self.ffn)
            if not m:
                raise ValueError(f"ffn must be 'dense' or E<N>A<K>, got {self.ffn!r}")
            n, k = int(m.group(1)), int(m.group(2))
            if not 1 <= k <= n:
                raise ValueError(f"top_k (A{k}) must not exceed n_routed (E{n})")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def is_moe(self) -> bool:
        return self.ffn != "dense"

    @property
    def n_routed(self) -> int:
        return int(_MOE_NAME.match(self.ffn).group(1)) if self.is_moe else 0

    @property
    def top_k(self) -> int:
        return int(_MOE_NAME.match(self.ffn).group(2)) if self.is_moe else 0

    @property
    def shared_width(self) -> int:
        return self.d_shared if self.d_shared is not None else self.top_k * self.d_expert

    @property
    def name(self) -> str:
        return self.ffn if self.is_moe else f"dense-{self.d_ff}"


def ffn_param_count(cfg: ArchConfig) -> tuple[int, int]:
    """(total, activated) FFN-sublayer parameters of one block, router included."""
    d = cfg.d_model
    if not cfg.is_moe:
        n = 2 * d * cfg.d_ff
        return n, n
    shared = cfg.n_shared * 2 * d * cfg.shared_width
    per_expert = 2 * d * cfg.d_expert
    router = cfg.n_routed * d
    return shared + cfg.n_routed * per_expert + router, shared + cfg.top_k * per_expert + router


def block_nonffn_param_count(cfg: ArchConfig) -> int:
    d = cfg.d_model
    n = 4 * d * d + 2 * (2 * d) + 6 * d * d + 6 * d  # self-attn, two LNs, modulation
    if cfg.cross_attention:
        n += 4 * d * d + 2 * d
    return n


def activated_param_count(cfg: ArchConfig, extra: int = 0) -> dict:
    """Total vs per-token activated parameters of the block stack.

    ``extra`` counts always-active parameters outside the blocks (embedders,
    output head).
    """
    ffn_total, ffn_active = ffn_param_count(cfg)
    other = block_nonffn_param_count(cfg)
    return {
        "total_params": cfg.n_blocks * (ffn_total + other) + extra,
        "activated_params": cfg.n_blocks * (ffn_active + other) + extra,
        "ffn_total": cfg.n_blocks * ffn_total,
        "ffn_activated": cfg.n_blocks * ffn_active,
    }


def ffn_flops(cfg: ArchConfig, n_tokens: int) -> int:
    """Multiply-add FLOPs (2 per MAC) of one FFN sublayer over ``n_tokens``."""
    d = cfg.d_model
    if not cfg.is_moe:
        return 2 * n_tokens * 2 * d * cfg.d_ff
    experts = 2 * n_tokens * 2 * d * (cfg.n_shared * cfg.shared_width + cfg.top_k * cfg.d_expert)
    router = 2 * n_tokens * d * cfg.n_routed
    return experts + router


# --- dispatch / combine -----------------------------------------------------


@dataclass
class DispatchPlan:
    order: torch.Tensor  # [T*K] slot id stored at each buffer row
    counts: torch.Tensor  # [N_r] rows per expert
    offsets: torch.Tensor  # [N_r + 1] segment boundaries
    gates: torch.Tensor  # [T*K] gate aligned with buffer rows
    n_tokens: int
    top_k: int

    @property
    def tokens(self) -> torch.Tensor:
        return self.order // self.top_k


def dispatch(tokens: torch.Tensor, decision: RoutingDecision, n_routed: int) -> tuple[torch.Tensor, DispatchPlan]:
    """Permute token copies into a buffer grouped by ascending expert index.

    Within a segment rows keep (token, slot) order.
    """
    T, K = decision.selected.shape
    if tokens.shape[0] != T:
        raise ValueError(f"decision covers {T} tokens but {tokens.shape[0]} were given")
    flat_expert = decision.selected.reshape(-1)
    if flat_expert.numel() and (flat_expert.min() < 0 or flat_expert.max() >= n_routed):
        raise ValueError("decision references an expert outside [0, n_routed)")
    order = torch.sort(flat_expert, stable=True).indices
    counts = torch.bincount(flat_expert, minlength=n_routed)
    offsets = torch.zeros(n_routed + 1, dtype=torch.long)
    offsets[1:] = torch.cumsum(counts, 0)
    plan = DispatchPlan(order, counts, offsets, decision.gates.reshape(-1)[order], T, K)
    return tokens[order // K], plan


def unpermute(buffer: torch.Tensor, plan: DispatchPlan) -> torch.Tensor:
    """Inverse of the dispatch permutation: rows back in (token, slot) order."""
    if buffer.shape[0] != plan.order.shape[0]:
        raise ValueError("buffer is not aligned with the dispatch plan")
    inv = torch.empty_like(plan.order)
    inv[plan.order] = torch.arange(plan.order.numel())
    return buffer[inv]


def grouped_expert_compute(
    buffer: torch.Tensor, plan: DispatchPlan, w_up: torch.Tensor, w_down: torch.Tensor, activation: str
) -> torch.Tensor:
    act = ACTIVATIONS[activation]
    # split/unbind keep the backward pass from materialising a full buffer per expert
    segments = buffer.split(plan.counts.tolist())
    ups, downs = w_up.unbind(0), w_down.unbind(0)
    pieces = [act(seg @ ups[j]) @ downs[j] for j, seg in enumerate(segments) if seg.shape[0]]
    if not pieces:
        return buffer.new_zeros((0, w_down.shape[-1]))
    return torch.cat(pieces, 0)


def combine(expert_out: torch.Tensor, plan: DispatchPlan, gates: torch.Tensor | None = None) -> torch.Tensor:
    """Gate-weighted sum of each token's slots; slots are in ascending expert order."""
    if expert_out.shape[0] != plan.n_tokens * plan.top_k:
        raise ValueError("expert outputs are not aligned with the dispatch plan")
    y = unpermute(expert_out, plan).reshape(plan.n_tokens, plan.top_k, -1)
    if gates is None:
        g = unpermute(plan.gates.unsqueeze(-1), plan).reshape(plan.n_tokens, plan.top_k, 1)
    else:
        g = gates.reshape(plan.n_tokens, plan.top_k, 1)
    return (g * y).sum(1)


# --- parameter containers ----------------------------------------------------


def init_weight(rng: np.random.Generator, shape, fan_in: int, dtype) -> nn.Parameter:
    return nn.Parameter(normal(rng, shape, 1.0 / math.sqrt(fan_in), dtype))


class DenseFFN(nn.Module):
    def __init__(self, d_model: int, d_ff: int, activation="gelu", rng=None, dtype=torch.float32):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        self.activation = activation
        self.w_up = init_weight(rng, (d_model, d_ff), d_model, dtype)
        self.w_down = init_weight(rng, (d_ff, d_model), d_ff, dtype)

    def as_expert(self) -> ExpertWeights:
        return ExpertWeights(self.w_up, self.w_down, self.activation)

    def delta(self, u: torch.Tensor) -> torch.Tensor:
        return expert_ffn(u, self.as_expert())

    def forward(self, u):
        return dense_ffn_forward(u, self)


def dense_ffn_forward(u: torch.Tensor, dense: DenseFFN) -> torch.Tensor:
    return u + dense.delta(u)


class MoEFFN(nn.Module):
    """Shared experts + sigmoid-routed experts; biases live in a buffer."""

    def __init__(self, cfg: ArchConfig, rng=None, dtype=torch.float32, bias_step=1e-3, affinity_floor=1e-12):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        d, n, de, ds = cfg.d_model, cfg.n_routed, cfg.d_expert, cfg.shared_width
        self.activation = cfg.activation
        self.router_cfg = RouterConfig(n, cfg.top_k, d, bias_step, affinity_floor)
        self.shared_up = init_weight(rng, (cfg.n_shared, d, ds), d, dtype)
        self.shared_down = init_weight(rng, (cfg.n_shared, ds, d), ds, dtype)
        self.routed_up = init_weight(rng, (n, d, de), d, dtype)
        self.routed_down = init_weight(rng, (n, de, d), de, dtype)
        self.centroids = init_weight(rng, (n, d), d, dtype)
        self.register_buffer("biases", torch.zeros(n, dtype=dtype))
        self.track_loads = False
        self.load_accum = torch.zeros(n, dtype=torch.long)
        self.last_decision: RoutingDecision | None = None

    @property
    def n_shared(self) -> int:
        return self.shared_up.shape[0]

    @property
    def router_state(self) -> RouterState:
        return RouterState(self.centroids, self.biases)

    def expert(self, j: int) -> ExpertWeights:
        return ExpertWeights(self.routed_up[j], self.routed_down[j], self.activation)

    def shared_expert(self, i: int) -> ExpertWeights:
        return ExpertWeights(self.shared_up[i], self.shared_down[i], self.activation)

    def delta(self, u: torch.Tensor) -> torch.Tensor:
        shape = u.shape
        flat = u.reshape(-1, shape[-1])
        out = moe_delta(flat, self)
        return out.reshape(shape)

    def forward(self, u):
        return moe_layer_forward(u, self)


def moe_delta(u: torch.Tensor, layer: MoEFFN, decision: RoutingDecision | None = None) -> torch.Tensor:
    """Shared-expert sum plus gate-weighted routed-expert sum for tokens ``u`` [T, d]."""
    if decision is None:
        decision = route(u, layer.router_state, layer.router_cfg)
    layer.last_decision = RoutingDecision(decision.selected, decision.affinities.detach(), decision.gates.detach())
    if layer.track_loads:
        layer.load_accum += expert_loads(decision, layer.router_cfg.n_routed)
    out = u.new_zeros(u.shape)
    for i in range(layer.n_shared):
        out = out + expert_ffn(u, layer.shared_expert(i))
    if u.shape[0] == 0:
        return out
    buffer, plan = dispatch(u, decision, layer.router_cfg.n_routed)
    y = grouped_expert_compute(buffer, plan, layer.routed_up, layer.routed_down, layer.activation)
    return out + combine(y, plan, decision.gates)


def moe_layer_forward(u: torch.Tensor, layer: MoEFFN) -> torch.Tensor:
    return u + layer.delta(u)


def reference_moe_forward(u: torch.Tensor, layer: MoEFFN) -> torch.Tensor:
    """Token-by-token, expert-by-expert transcription of the MoE layer formula."""
    n, k = layer.router_cfg.n_routed, layer.router_cfg.top_k
    eps = layer.router_cfg.affinity_floor
    act = ACTIVATIONS[layer.activation]
    rows = []
    for t in range(u.shape[0]):
        ut = u[t]
        h = ut
        for i in range(layer.n_shared):
            h = h + act(ut @ layer.shared_up[i]) @ layer.shared_down[i]
        s = [max(1.0 / (1.0 + math.exp(-float((ut @ layer.centroids[j]).detach()))), eps) for j in range(n)]
        scored = [(s[j] + float(layer.biases[j].detach()), j) for j in range(n)]
        # descending score, lowest index first on ties
        chosen = sorted(j for _, j in sorted(scored, key=lambda p: (-p[0], p[1]))[:k])
        z = sum(s[j] for j in chosen)
        for j in chosen:
            h = h + (s[j] / z) * (act(ut @ layer.routed_up[j]) @ layer.routed_down[j])
        rows.append(h)
    if not rows:
        return u.new_zeros((0, u.shape[1]))
    return torch.stack(rows)


# --- attention and the full block -------------------------------------------


def attention(xq: torch.Tensor, xkv: torch.Tensor, wq, wk, wv, wo, n_heads: int) -> torch.Tensor:
    """Multi-head softmax attention; inputs ``[B, S, d]``. No positional encoding."""
    B, Sq, d = xq.shape
    Sk = xkv.shape[1]
    hd = d // n_heads
    q = (xq @ wq).reshape(B, Sq, n_heads, hd).transpose(1, 2)
    k = (xkv @ wk).reshape(B, Sk, n_heads, hd).transpose(1, 2)
    v = (xkv @ wv).reshape(B, Sk, n_heads, hd).transpose(1, 2)
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
    return (att @ v).transpose(1, 2).reshape(B, Sq, d) @ wo


class DiTBlock(nn.Module):
    """Pre-norm block with timestep shift/scale/gate modulation.

    The FFN sublayer reads the normalised, modulated residual stream and is
    the MoE layer (routing included) or a dense FFN; its output is added to
    the residual stream through the modulation gate.
    """

    def __init__(self, cfg: ArchConfig, rng=None, dtype=torch.float32):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.norm1 = nn.LayerNorm(d, dtype=dtype)
        self.wq = init_weight(rng, (d, d), d, dtype)
        self.wk = init_weight(rng, (d, d), d, dtype)
        self.wv = init_weight(rng, (d, d), d, dtype)
        self.wo = init_weight(rng, (d, d), d, dtype)
        self.cross = cfg.cross_attention
        if self.cross:
            self.norm_x = nn.LayerNorm(d, dtype=dtype)
            self.cq = init_weight(rng, (d, d), d, dtype)
            self.ck = init_weight(rng, (d, d), d, dtype)
            self.cv = init_weight(rng, (d, d), d, dtype)
            self.co = init_weight(rng, (d, d), d, dtype)
        self.norm2 = nn.LayerNorm(d, dtype=dtype)
        self.mod_w = nn.Parameter(torch.zeros(d, 6 * d, dtype=dtype))
        self.mod_b = nn.Parameter(torch.zeros(6 * d, dtype=dtype))
        if cfg.is_moe:
            self.ffn = MoEFFN(cfg, rng, dtype)
        else:
            self.ffn = DenseFFN(d, cfg.d_ff, cfg.activation, rng, dtype)

    def attention_params(self) -> dict[str, torch.Tensor]:
        """Every non-FFN tensor of the block (attention, norms, modulation)."""
        return {k: v for k, v in self.named_parameters() if not k.startswith("ffn.")}

    def forward(self, x: torch.Tensor, t_embed: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        m = (t_embed @ self.mod_w + self.mod_b).unsqueeze(1)
        sh1, sc1, g1, sh2, sc2, g2 = m.chunk(6, dim=-1)
        a = self.norm1(x) * (1 + sc1) + sh1
        x = x + (1 + g1) * attention(a, a, self.wq, self.wk, self.wv, self.wo, self.n_heads)
        if self.cross:
            if cond is None or cond.shape[1] == 0:
                raise ValueError("cross-attention block needs condition tokens")
            x = x + attention(self.norm_x(x), cond, self.cq, self.ck, self.cv, self.co, self.n_heads)
        z = self.norm2(x) * (1 + sc2) + sh2
        return x + (1 + g2) * self.ffn.delta(z)


def dit_block_forward(seq: torch.Tensor, block: DiTBlock, t_embed: torch.Tensor, cond=None) -> torch.Tensor:
    """Single-sequence convenience wrapper: ``seq`` is ``[S, d]``, ``t_embed`` is ``[d]``."""
    c = None if cond is None else cond.unsqueeze(0)
    return block(seq.unsqueeze(0), t_embed.reshape(1, -1), c)[0]
