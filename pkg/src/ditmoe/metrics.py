"""Sample-quality metrics for toy runs."""

from __future__ import annotations

import math

import numpy as np
import torch

from .datasets import gmm8_means


def _sq_dists(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)


def _entropic_ot(x, y, eps: float, ratio: float, final_iters: int) -> float:
    """Dual value of entropic OT between uniform clouds (log-domain, eps-annealed).

    Potentials are updated simultaneously and averaged, which makes the
    routine exactly mirror-symmetric in (x, y).
    """
    n, m = x.shape[0], y.shape[0]
    C = _sq_dists(x, y)
    la, lb = -math.log(n), -math.log(m)
    f = torch.zeros(n, dtype=C.dtype)
    g = torch.zeros(m, dtype=C.dtype)
    e = max(C.max().item(), eps)
    schedule = []
    while e > eps:
        schedule.append(e)
        e *= ratio
    schedule += [eps] * final_iters
    for e in schedule:
        f_new = -e * torch.logsumexp(lb + (g[None, :] - C) / e, dim=1)
        g_new = -e * torch.logsumexp(la + (f[:, None] - C) / e, dim=0)
        f, g = 0.5 * (f + f_new), 0.5 * (g + g_new)
    return (f.mean() + g.mean()).item()


def eval_w2(a, b, eps: float = 0.01, ratio: float = 0.8, final_iters: int = 60) -> float:
    """Debiased entropic 2-Wasserstein estimate (Sinkhorn divergence, square-rooted).

    Deterministic: fixed annealing schedule and iteration count.
    """
    a = torch.as_tensor(np.asarray(a), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(b), dtype=torch.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("eval_w2 needs nonempty point sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError("point sets have different dimensionality")
    ab = _entropic_ot(a, b, eps, ratio, final_iters)
    aa = _entropic_ot(a, a, eps, ratio, final_iters)
    bb = _entropic_ot(b, b, eps, ratio, final_iters)
    return math.sqrt(max(ab - 0.5 * (aa + bb), 0.0))


def nearest_component(x, means=None) -> np.ndarray:
    means = gmm8_means() if means is None else np.asarray(means)
    x = np.asarray(x)
    return ((x[:, None, :] - means[None]) ** 2).sum(-1).argmin(1)


def conditional_accuracy(samples, labels, means=None) -> float:
    """Fraction of samples whose nearest mixture component is their label's."""
    labels = np.asarray(labels).reshape(len(labels), -1)[:, 0]
    return float((nearest_component(samples, means) == labels).mean())
