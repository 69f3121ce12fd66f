"""Conditional rectified-flow model, training loop and Euler sampler.

Interpolation is ``x_t = (1 - t) x0 + t eps`` with velocity target
``eps - x0``; sampling integrates from ``t = 1`` (noise) down to ``t = 0``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .datasets import ToyData
from .moe_block import ArchConfig, DiTBlock, MoEFFN, activated_param_count, init_weight
from .numerics import load_container, make_rng, normal, save_container
from .router import RouterState, load_stats, update_bias

IN_CONTEXT = "in_context"
CROSS_ATTENTION = "cross_attention"


class DivergenceError(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss at step {record.get('step')}")
        self.record = record


@dataclass
class FlowConfig:
    n_steps: int = 30
    t_schedule: list[float] | None = None
    cfg_scale: float = 1.0
    cond_drop_prob: float = 0.1

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not 0 <= self.cond_drop_prob <= 1:
            raise ValueError("cond_drop_prob must lie in [0, 1]")
        if self.t_schedule is not None:
            s = list(self.t_schedule)
            if len(s) != self.n_steps + 1 or s[0] != 0.0 or s[-1] != 1.0 or any(b <= a for a, b in zip(s, s[1:])):
                raise ValueError("t_schedule must increase strictly from 0 to 1 with n_steps + 1 points")

    @property
    def schedule(self) -> list[float]:
        if self.t_schedule is not None:
            return list(self.t_schedule)
        return [i / self.n_steps for i in range(self.n_steps + 1)]


@dataclass
class ModelConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    data_dim: int = 2
    patch: int = 2
    cardinalities: tuple[int, ...] = ()
    encoder: str = "weak"  # weak | rich
    injection: str = IN_CONTEXT
    rich_tokens: int = 2
    t_freqs: int = 16

    def __post_init__(self):
        if self.data_dim % self.patch:
            raise ValueError("data_dim must be a multiple of patch")
        if self.encoder not in ("weak", "rich"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.injection not in (IN_CONTEXT, CROSS_ATTENTION):
            raise ValueError(f"unknown injection mode {self.injection!r}")
        if self.injection == CROSS_ATTENTION and not self.cardinalities:
            raise ValueError("cross-attention injection needs a conditional model")
        if self.arch.cross_attention != (self.injection == CROSS_ATTENTION):
            self.arch = ArchConfig(**{**asdict(self.arch), "cross_attention": self.injection == CROSS_ATTENTION})
        if self.encoder == "weak" and sum(c + 1 for c in self.cardinalities) > self.arch.d_model:
            raise ValueError("one-hot condition tokens do not fit in d_model")

    @property
    def n_noisy(self) -> int:
        return self.data_dim // self.patch

    @property
    def conditional(self) -> bool:
        return bool(self.cardinalities)

    @property
    def n_cond_tokens(self) -> int:
        per = 1 if self.encoder == "weak" else self.rich_tokens
        return per * len(self.cardinalities)


def timestep_features(t: torch.Tensor, n_freqs: int) -> torch.Tensor:
    k = torch.arange(n_freqs, dtype=t.dtype)
    w = torch.exp(-math.log(1000.0) * k / n_freqs)
    arg = 100.0 * t[:, None] * w[None, :]
    return torch.cat([torch.cos(arg), torch.sin(arg)], -1)


def build_sequence(cond_tokens: torch.Tensor | None, noisy_tokens: torch.Tensor, mode: str):
    """Return ``(sequence, cross_tokens, n_cond)``.

    In-context: one sequence ``[cond | noisy]``; velocities are read from the
    trailing noisy positions only. Cross-attention: the sequence is the noisy
    tokens and the condition is handed to every block separately.
    """
    if mode == IN_CONTEXT:
        if cond_tokens is None or cond_tokens.shape[1] == 0:
            return noisy_tokens, None, 0
        return torch.cat([cond_tokens, noisy_tokens], 1), None, cond_tokens.shape[1]
    if mode == CROSS_ATTENTION:
        if cond_tokens is None or cond_tokens.shape[1] == 0:
            raise ValueError("cross-attention mode needs condition tokens")
        return noisy_tokens, cond_tokens, 0
    raise ValueError(f"unknown injection mode {mode!r}")


class FlowModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        rng = make_rng(seed, 0x30DE1)
        a = cfg.arch
        d = a.d_model
        self.in_proj = init_weight(rng, (cfg.patch, d), cfg.patch, dtype)
        self.pos_emb = nn.Parameter(normal(rng, (cfg.n_noisy, d), 0.1, dtype))
        self.t_w1 = init_weight(rng, (2 * cfg.t_freqs, d), 2 * cfg.t_freqs, dtype)
        self.t_b1 = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.t_w2 = init_weight(rng, (d, d), d, dtype)
        if cfg.conditional and cfg.encoder == "rich":
            self.cond_emb = nn.ParameterList(
                [nn.Parameter(normal(rng, (c + 1, d), 1.0, dtype)) for c in cfg.cardinalities]
            )
            mix = normal(rng, (len(cfg.cardinalities), cfg.rich_tokens, d, d), 1.5 / math.sqrt(d), dtype)
            self.register_buffer("cond_mix", mix)
        self.blocks = nn.ModuleList([DiTBlock(a, make_rng(seed, 0xB10C, i), dtype) for i in range(a.n_blocks)])
        self.out_norm = nn.LayerNorm(d, elementwise_affine=False, dtype=dtype)
        self.out_mod_w = nn.Parameter(torch.zeros(d, 2 * d, dtype=dtype))
        self.out_mod_b = nn.Parameter(torch.zeros(2 * d, dtype=dtype))
        self.out_proj = init_weight(rng, (d, cfg.patch), d, dtype)
        self.n_evals = 0

    @property
    def dtype(self):
        return self.in_proj.dtype

    def moe_layers(self) -> list[MoEFFN]:
        return [b.ffn for b in self.blocks if isinstance(b.ffn, MoEFFN)]

    def null_labels(self, batch: int) -> torch.Tensor:
        return torch.tensor(self.cfg.cardinalities, dtype=torch.long).expand(batch, -1).clone()

    def encode_condition(self, labels: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        B = labels.shape[0]
        d = cfg.arch.d_model
        if cfg.encoder == "weak":
            toks = torch.zeros(B, len(cfg.cardinalities), d, dtype=self.dtype)
            off = 0
            for i, c in enumerate(cfg.cardinalities):
                toks[torch.arange(B), i, off + labels[:, i]] = 1.0
                off += c + 1
            return toks
        toks = []
        for i, table in enumerate(self.cond_emb):
            e = table[labels[:, i]]
            toks.append(torch.tanh(torch.einsum("bd,rde->bre", e, self.cond_mix[i])))
        return torch.cat(toks, 1)

    def time_embed(self, t: torch.Tensor) -> torch.Tensor:
        h = timestep_features(t.to(self.dtype), self.cfg.t_freqs) @ self.t_w1 + self.t_b1
        return torch.nn.functional.silu(h) @ self.t_w2

    def forward(self, x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor | None = None) -> torch.Tensor:
        self.n_evals += 1
        cfg = self.cfg
        B = x.shape[0]
        if t.dim() == 0:
            t = t.expand(B)
        noisy = x.reshape(B, cfg.n_noisy, cfg.patch) @ self.in_proj + self.pos_emb
        cond = None
        if cfg.conditional:
            cond = self.encode_condition(self.null_labels(B) if labels is None else labels)
        seq, cross, n_cond = build_sequence(cond, noisy, cfg.injection)
        temb = self.time_embed(t)
        for blk in self.blocks:
            seq = blk(seq, temb, cross)
        out = seq[:, n_cond:]
        sh, sc = (temb @ self.out_mod_w + self.out_mod_b).unsqueeze(1).chunk(2, -1)
        out = (self.out_norm(out) * (1 + sc) + sh) @ self.out_proj
        return out.reshape(B, cfg.data_dim)

    def param_counts(self) -> dict:
        block_ids = {id(p) for b in self.blocks for p in b.parameters()}
        extra = sum(p.numel() for p in self.parameters() if id(p) not in block_ids)
        counts = activated_param_count(self.cfg.arch, extra)
        counts["module_params"] = sum(p.numel() for p in self.parameters())
        return counts


# --- objective ---------------------------------------------------------------


def interpolate(x0: torch.Tensor, eps: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    t = torch.as_tensor(t, dtype=x0.dtype)
    if (t < 0).any() or (t > 1).any():
        raise ValueError("t must lie in [0, 1]")
    tt = t.reshape(-1, *([1] * (x0.dim() - 1))) if t.dim() else t
    return (1 - tt) * x0 + tt * eps, eps - x0


def flow_loss(model, x0, labels=None, rng=None, t=None, eps=None) -> torch.Tensor:
    """Mean squared velocity error at uniformly drawn ``t``."""
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if t is None:
        t = torch.from_numpy(rng.uniform(0.0, 1.0, B)).to(x0.dtype)
    if eps is None:
        eps = normal(rng, tuple(x0.shape), 1.0, x0.dtype)
    xt, v_target = interpolate(x0, eps, t)
    v = model(xt, t, labels)
    return ((v - v_target) ** 2).mean()


# --- sampling ----------------------------------------------------------------


def guided_velocity(model, x, t, labels, cfg_scale: float) -> torch.Tensor:
    tt = torch.full((x.shape[0],), float(t), dtype=x.dtype)
    if labels is None or not model.cfg.conditional:
        return model(x, tt, labels)
    v_c = model(x, tt, labels)
    if cfg_scale == 1.0:
        return v_c
    v_u = model(x, tt, model.null_labels(x.shape[0]))
    return v_u + cfg_scale * (v_c - v_u)


def integrate(model, x, schedule, labels, cfg_scale=1.0, start=0, stop=None, trajectory=None):
    """Euler steps ``start..stop`` (step 0 begins at t=1) of the reverse-time ODE."""
    n = len(schedule) - 1
    stop = n if stop is None else stop
    for i in range(start, stop):
        t_cur, t_next = schedule[n - i], schedule[n - i - 1]
        x = x + (t_next - t_cur) * guided_velocity(model, x, t_cur, labels, cfg_scale)
        if trajectory is not None:
            trajectory.append(x)
    return x


def sample(model, cfg: FlowConfig, labels=None, rng=None, noise=None, n=None, grad=False, trajectory=None):
    """Generate samples from noise (drawn from ``rng`` unless given)."""
    if noise is None:
        count = n if n is not None else labels.shape[0]
        noise = normal(rng, (count, model.cfg.data_dim), 1.0, model.dtype)
    with torch.set_grad_enabled(grad):
        return integrate(model, noise, cfg.schedule, labels, cfg.cfg_scale, trajectory=trajectory)


# --- training ----------------------------------------------------------------


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 256
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)


@dataclass
class TrainState:
    model: FlowModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    log: list[dict] = field(default_factory=list)

    def losses(self, name="loss") -> list[float]:
        return [r["value"] for r in self.log if r["name"] == name]

    def series(self, name) -> tuple[list[int], list[float]]:
        rows = [r for r in self.log if r["name"] == name]
        return [r["step"] for r in rows], [r["value"] for r in rows]

    def save(self, path):
        tensors = {}
        for k, v in self.model.state_dict().items():
            tensors[f"model/{k}"] = v
        names = {id(p): k for k, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                for key, val in self.optimizer.state.get(p, {}).items():
                    tensors[f"opt/{names[id(p)]}/{key}"] = torch.as_tensor(val)
        meta = {"step": self.step, "rng": self.rng.bit_generator.state, "log": self.log}
        return save_container(path, tensors, meta)

    def load(self, path):
        tensors, meta = load_container(path)
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
        params = dict(self.model.named_parameters())
        self.optimizer.state.clear()
        for k, v in tensors.items():
            if k.startswith("opt/"):
                pname, key = k[4:].rsplit("/", 1)
                self.optimizer.state[params[pname]][key] = v.clone()
        self.step = meta["step"]
        self.rng.bit_generator.state = meta["rng"]
        self.log = list(meta["log"])
        return self


def make_optimizer(model, opt: OptimConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=opt.lr, weight_decay=opt.weight_decay, betas=opt.betas)


def new_train_state(model: FlowModel, opt: OptimConfig, seed: int) -> TrainState:
    return TrainState(model, make_optimizer(model, opt), make_rng(seed, 0x7EA1))


def set_load_tracking(model, on: bool):
    for layer in model.moe_layers():
        layer.track_loads = on
        if on:
            layer.load_accum = torch.zeros_like(layer.load_accum)


def apply_bias_updates(model) -> dict | None:
    """One balancing step per MoE layer from the loads accumulated this step."""
    layers = model.moe_layers()
    if not layers:
        return None
    mom, ent, binf = [], [], []
    for layer in layers:
        loads = layer.load_accum
        if loads.sum() > 0:
            st = load_stats(loads, layer.router_cfg.n_routed)
            mom.append(st["max_over_mean"])
            ent.append(st["selection_entropy"])
            with torch.no_grad():
                layer.biases.copy_(update_bias(RouterState(layer.centroids, layer.biases), loads, layer.router_cfg))
        binf.append(layer.biases.abs().max().item())
    return {
        "max_over_mean": float(np.mean(mom)) if mom else float("nan"),
        "selection_entropy": float(np.mean(ent)) if ent else float("nan"),
        "bias_inf_norm": max(binf),
    }


class EvalBatch:
    """Fixed (x0, labels, t, eps) batch for low-variance loss curves."""

    def __init__(self, data: ToyData, n: int, seed: int, dtype=torch.float32):
        rng = make_rng(seed, 0xE7A1)
        idx = rng.integers(0, len(data), n)
        self.x0 = torch.from_numpy(data.x[idx]).to(dtype)
        self.labels = None if data.labels is None else torch.from_numpy(data.labels[idx]).long()
        self.t = torch.from_numpy(rng.uniform(0, 1, n)).to(dtype)
        self.eps = normal(rng, (n, data.dim), 1.0, dtype)

    def loss(self, model) -> float:
        with torch.no_grad():
            return flow_loss(model, self.x0, self.labels, t=self.t, eps=self.eps).item()


def draw_batch(data: ToyData, rng, batch: int, cond_drop_prob: float, model: FlowModel, dtype):
    idx = rng.integers(0, len(data), batch)
    x0 = torch.from_numpy(data.x[idx]).to(dtype)
    labels = None
    if data.labels is not None and model.cfg.conditional:
        lab = data.labels[idx].copy()
        if cond_drop_prob > 0:
            drop = rng.uniform(0, 1, batch) < cond_drop_prob
            lab[drop] = np.asarray(model.cfg.cardinalities)
        labels = torch.from_numpy(lab).long()
    return x0, labels


def train(
    state: TrainState,
    data: ToyData,
    steps: int,
    opt: OptimConfig | None = None,
    cond_drop_prob: float = 0.1,
    eval_batch: EvalBatch | None = None,
    eval_every: int = 50,
    telemetry: bool = False,
    sink=None,
) -> TrainState:
    """Run ``steps`` optimizer steps of flow matching; balancing biases update every step.

    ``sink`` (callable taking a record dict) receives every metric as it is logged.
    """
    opt = opt or OptimConfig()
    model = state.model
    dtype = model.dtype

    def emit(name, value):
        rec = {"step": state.step, "name": name, "value": float(value)}
        state.log.append(rec)
        if sink is not None:
            sink(rec)

    if eval_batch is not None and state.step == 0:
        emit("eval_loss", eval_batch.loss(model))
    model.train()
    for _ in range(steps):
        x0, labels = draw_batch(data, state.rng, opt.batch_size, cond_drop_prob, model, dtype)
        set_load_tracking(model, True)
        loss = flow_loss(model, x0, labels, state.rng)
        set_load_tracking(model, False)
        if not torch.isfinite(loss):
            raise DivergenceError({"step": state.step, "loss": loss.item(), "event": "divergence"})
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if opt.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        state.optimizer.step()
        bal = apply_bias_updates(model)
        state.step += 1
        emit("loss", loss.item())
        if telemetry and bal is not None:
            for k, v in bal.items():
                emit(k, v)
        if eval_batch is not None and state.step % eval_every == 0:
            emit("eval_loss", eval_batch.loss(model))
    return state
