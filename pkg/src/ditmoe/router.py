"""Sigmoid token-choice routing with loss-free expert-bias balancing.

The bias only decides *which* experts enter a token's Top-K set. Gate values
are always normalised raw affinities, so the bias never reaches the output and
never receives a gradient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch


@dataclass
class RouterConfig:
    n_routed: int
    top_k: int
    d_model: int
    bias_step: float = 1e-3
    affinity_floor: float = 1e-12

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_routed:
            raise ValueError(f"top_k={self.top_k} must lie in [1, n_routed={self.n_routed}]")
        if self.bias_step < 0:
            raise ValueError("bias_step must be >= 0")
        if self.affinity_floor < 0:
            raise ValueError("affinity_floor must be >= 0")


@dataclass
class RouterState:
    centroids: torch.Tensor  # [N_r, d_model]
    biases: torch.Tensor  # [N_r]

    @classmethod
    def zeros_bias(cls, centroids: torch.Tensor) -> "RouterState":
        return cls(centroids, torch.zeros(centroids.shape[0], dtype=centroids.dtype))


@dataclass
class RoutingDecision:
    selected: torch.Tensor  # [T, K] long, ascending per row
    affinities: torch.Tensor  # [T, K]
    gates: torch.Tensor  # [T, K]

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]

    def to_records(self) -> list[dict]:
        sel = self.selected.tolist()
        g = self.gates.detach().tolist()
        return [{"token": t, "selected": sel[t], "gates": g[t]} for t in range(len(sel))]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.to_records())


def affinity_scores(u: torch.Tensor, state: RouterState, floor: float = 1e-12) -> torch.Tensor:
    if u.dim() != 2 or u.shape[1] != state.centroids.shape[1]:
        raise ValueError(f"token shape {tuple(u.shape)} does not match centroids {tuple(state.centroids.shape)}")
    s = torch.sigmoid(u @ state.centroids.T)
    return s.clamp_min(floor) if floor > 0 else s


def select_topk(s: torch.Tensor, biases: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest ``s + b`` per row, ascending.

    Works on a single row ``[N_r]`` or a batch ``[T, N_r]``. Ties go to the
    lowest expert index.
    """
    n = s.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    with torch.no_grad():
        score = s.detach() + biases
        order = torch.sort(score, dim=-1, descending=True, stable=True).indices
        return torch.sort(order[..., :k], dim=-1).values


def gate_weights(s: torch.Tensor, selected: torch.Tensor) -> torch.Tensor:
    """Affinities of the selected experts normalised to sum to one."""
    if selected.numel() == 0 or selected.shape[-1] == 0:
        raise ValueError("empty expert selection")
    picked = torch.gather(s, -1, selected)
    return picked / picked.sum(dim=-1, keepdim=True)


def route(u: torch.Tensor, state: RouterState, cfg: RouterConfig) -> RoutingDecision:
    s = affinity_scores(u, state, cfg.affinity_floor)
    selected = select_topk(s, state.biases, cfg.top_k)
    picked = torch.gather(s, -1, selected)
    return RoutingDecision(selected, picked, picked / picked.sum(dim=-1, keepdim=True))


def expert_loads(decision: RoutingDecision, n_routed: int) -> torch.Tensor:
    return torch.bincount(decision.selected.reshape(-1), minlength=n_routed)


def update_bias(state: RouterState, loads, cfg: RouterConfig) -> torch.Tensor:
    """Sign-of-violation step: under-loaded experts move up, hot experts down."""
    loads = torch.as_tensor(loads, dtype=torch.float64)
    if loads.shape != (state.biases.shape[0],):
        raise ValueError("loads must have one entry per routed expert")
    if (loads < 0).any():
        raise ValueError("loads must be nonnegative")
    step = cfg.bias_step * torch.sign(loads.mean() - loads)
    return state.biases + step.to(state.biases.dtype)


def load_stats(decision_or_counts, n_routed: int) -> dict:
    if isinstance(decision_or_counts, RoutingDecision):
        if decision_or_counts.n_tokens == 0:
            raise ValueError("load statistics are undefined for zero tokens")
        counts = expert_loads(decision_or_counts, n_routed)
    else:
        counts = torch.as_tensor(decision_or_counts)
    counts = counts.to(torch.float64)
    total = counts.sum().item()
    if total == 0:
        raise ValueError("load statistics are undefined for zero tokens")
    p = counts / total
    nz = p[p > 0]
    return {
        "counts": [int(c) for c in counts.tolist()],
        "max_over_mean": counts.max().item() / counts.mean().item(),
        "selection_entropy": float(-(nz * nz.log()).sum().item()),
    }


def max_entropy(n_routed: int) -> float:
    return math.log(n_routed)
