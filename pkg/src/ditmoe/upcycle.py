"""Dense-to-MoE initialisation by per-expert random neuron sampling.

Neuron indices are 0-based. Expert ``i`` of block ``b`` draws its subset from
``make_rng(base_seed, b, i)``; the shared expert uses index ``n_routed``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .moe_block import ExpertWeights
from .numerics import load_container, make_rng, normal, save_container, seeded_permutation

STRATEGIES = ("from_scratch", "attn_init", "expert_attn", "expert_attn_drop")
SAMPLERS = ("random", "contiguous", "magnitude")


class UpcycleError(ValueError):
    pass


@dataclass
class UpcycleConfig:
    n_routed: int
    d_e: int
    base_seed: int = 0
    strategy: str = "expert_attn"
    drop_ratio: float = 0.5
    sampler: str = "random"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UpcycleError(f"unknown strategy {self.strategy!r}")
        if self.sampler not in SAMPLERS:
            raise UpcycleError(f"unknown sampler {self.sampler!r}")
        if not 0 <= self.drop_ratio <= 1:
            raise UpcycleError("drop_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class ExpertSubset:
    index: int
    neurons: tuple[int, ...]
    attempt: int = 0

    @property
    def key(self) -> frozenset:
        return frozenset(self.neurons)


def sample_expert_subset(i: int, d_ff: int, d_e: int, base_seed: int, block: int = 0, taken=None) -> ExpertSubset:
    """First ``d_e`` entries of a permutation seeded by ``(base_seed, block, i)``.

    ``taken`` is a set of frozensets already in use; a collision reseeds with an
    attempt counter until the subset is new.
    """
    if d_e > d_ff:
        raise UpcycleError(f"d_e={d_e} exceeds d_ff={d_ff}")
    if d_e < 1:
        raise UpcycleError("d_e must be >= 1")
    attempt = 0
    while True:
        rng = make_rng(base_seed, block, i) if attempt == 0 else make_rng(base_seed, block, i, attempt)
        sub = ExpertSubset(i, tuple(int(v) for v in seeded_permutation(d_ff, rng)[:d_e]), attempt)
        if taken is None or sub.key not in taken:
            return sub
        attempt += 1
        if attempt > 10_000:
            raise UpcycleError("could not find a distinct neuron subset")


def sample_all_subsets(n: int, d_ff: int, d_e: int, base_seed: int, block: int = 0,
                       sampler: str = "random", magnitudes=None) -> list[ExpertSubset]:
    if sampler == "random":
        taken: set = set()
        out = []
        for i in range(n):
            s = sample_expert_subset(i, d_ff, d_e, base_seed, block, taken)
            taken.add(s.key)
            out.append(s)
        return out
    if sampler == "contiguous":
        return [ExpertSubset(i, tuple((i * d_e + k) % d_ff for k in range(d_e))) for i in range(n)]
    if sampler == "magnitude":
        if magnitudes is None:
            raise UpcycleError("magnitude sampler needs per-neuron magnitudes")
        p = np.asarray(magnitudes, dtype=np.float64)
        p = p / p.sum()
        out = []
        for i in range(n):
            rng = make_rng(base_seed, block, i)
            out.append(ExpertSubset(i, tuple(int(v) for v in rng.choice(d_ff, d_e, replace=False, p=p))))
        return out
    raise UpcycleError(f"unknown sampler {sampler!r}")


def slice_expert_weights(w_up: torch.Tensor, w_down: torch.Tensor, subset: ExpertSubset,
                         activation: str = "gelu") -> ExpertWeights:
    """Columns ``S_i`` of the up projection and rows ``S_i`` of the down projection."""
    idx = list(subset.neurons)
    d_ff = w_up.shape[1]
    if any(not 0 <= j < d_ff for j in idx):
        raise UpcycleError("subset index out of range")
    sel = torch.tensor(idx, dtype=torch.long)
    return ExpertWeights(w_up[:, sel].clone(), w_down[sel, :].clone(), activation)


def drop_reinit(e: ExpertWeights, ratio: float, rng) -> ExpertWeights:
    """Redraw ``ceil(ratio * d_e)`` neurons (up column + down row together)."""
    if not 0 <= ratio <= 1:
        raise UpcycleError("ratio must lie in [0, 1]")
    d_model, d_e = e.w_up.shape
    n = math.ceil(ratio * d_e - 1e-12)
    up, down = e.w_up.clone(), e.w_down.clone()
    if n:
        pos = torch.from_numpy(np.sort(rng.choice(d_e, n, replace=False)))
        up[:, pos] = normal(rng, (d_model, n), 1 / math.sqrt(d_model), up.dtype)
        down[pos, :] = normal(rng, (n, down.shape[1]), 1 / math.sqrt(d_e), down.dtype)
    return ExpertWeights(up, down, e.activation)


def coverage(subsets, d_ff: int) -> float:
    union = set()
    for s in subsets:
        union.update(s.neurons)
    return len(union) / d_ff


def expected_coverage(d_e: int, d_ff: int, n_routed: int) -> float:
    if d_e > d_ff:
        raise UpcycleError("d_e exceeds d_ff")
    return 1.0 - (1.0 - d_e / d_ff) ** n_routed


def oversampling_ratio(d_e: int, d_ff: int, n_routed: int) -> float:
    return n_routed * d_e / d_ff


# --- checkpoint-level procedure ---------------------------------------------


class DenseCheckpoint:
    """Named tensors of a dense model; per block ``blocks.{b}.ffn.w_up`` / ``w_down``."""

    def __init__(self, tensors: dict[str, torch.Tensor]):
        self.tensors = {k: v.detach().clone() for k, v in tensors.items()}

    @classmethod
    def from_model(cls, model) -> "DenseCheckpoint":
        return cls(dict(model.state_dict()))

    @classmethod
    def load(cls, path) -> "DenseCheckpoint":
        tensors, _ = load_container(path)
        if any(k.startswith("model/") for k in tensors):
            tensors = {k[6:]: v for k, v in tensors.items() if k.startswith("model/")}
        return cls(tensors)

    def save(self, path):
        return save_container(path, {f"model/{k}": v for k, v in self.tensors.items()}, {"kind": "dense"})

    def ffn(self, block: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.tensors[f"blocks.{block}.ffn.w_up"], self.tensors[f"blocks.{block}.ffn.w_down"]

    @property
    def d_ff(self) -> int:
        return self.ffn(0)[0].shape[1]


def _is_transferable(name: str) -> bool:
    return ".ffn." not in name


def upcycle(dense: DenseCheckpoint | None, cfg: UpcycleConfig, moe_model) -> dict:
    """Initialise ``moe_model`` in place per ``cfg.strategy``; returns a coverage report.

    ``moe_model`` arrives with its own random init (router centroids included),
    which ``from_scratch`` keeps untouched.
    """
    report = {"strategy": cfg.strategy, "blocks": []}
    layers = moe_model.moe_layers()
    for layer in layers:
        with torch.no_grad():
            layer.biases.zero_()
    if cfg.strategy == "from_scratch":
        return report
    if dense is None:
        raise UpcycleError(f"strategy {cfg.strategy!r} needs a dense checkpoint")
    state = moe_model.state_dict()
    with torch.no_grad():
        for name, t in dense.tensors.items():
            if _is_transferable(name) and name in state:
                if state[name].shape != t.shape:
                    raise UpcycleError(f"shape mismatch for {name}: {tuple(state[name].shape)} vs {tuple(t.shape)}")
                state[name].copy_(t.to(state[name].dtype))
        if cfg.strategy == "attn_init":
            return report
        for b, block in enumerate(moe_model.blocks):
            layer = block.ffn
            w_up, w_down = dense.ffn(b)
            d_ff = w_up.shape[1]
            mags = (w_up.norm(dim=0) * w_down.norm(dim=1)).numpy() if cfg.sampler == "magnitude" else None
            subsets = sample_all_subsets(cfg.n_routed, d_ff, cfg.d_e, cfg.base_seed, b, cfg.sampler, mags)
            drop_rng = make_rng(cfg.base_seed, b, 0xD209)
            for j, s in enumerate(subsets):
                e = slice_expert_weights(w_up, w_down, s, layer.activation)
                if cfg.strategy == "expert_attn_drop":
                    e = drop_reinit(e, cfg.drop_ratio, drop_rng)
                layer.routed_up[j].copy_(e.w_up)
                layer.routed_down[j].copy_(e.w_down)
            d_sh = layer.shared_up.shape[-1]
            for i in range(layer.n_shared):
                s = sample_expert_subset(cfg.n_routed + i, d_ff, min(d_sh, d_ff), cfg.base_seed, b)
                e = slice_expert_weights(w_up, w_down, s, layer.activation)
                layer.shared_up[i, :, : e.width].copy_(e.w_up)
                layer.shared_down[i, : e.width, :].copy_(e.w_down)
            report["blocks"].append({
                "block": b,
                "coverage": coverage(subsets, d_ff),
                "expected_coverage": expected_coverage(cfg.d_e, d_ff, cfg.n_routed),
                "oversampling": oversampling_ratio(cfg.d_e, d_ff, cfg.n_routed),
                "distinct": len({s.key for s in subsets}) == len(subsets),
                "retries": sum(s.attempt for s in subsets),
            })
    return report
