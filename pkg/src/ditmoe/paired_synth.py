"""Pre-/post-edit pair synthesis with shared noise and shared early denoising steps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .datasets import target_means
from .flow import FlowConfig, integrate
from .numerics import make_rng, normal

FORWARD = "forward"
INVERTED = "inverted"


@dataclass
class PairSpec:
    cond_pre: tuple[int, ...]
    cond_post: tuple[int, ...]
    shared_steps: int
    seed: int
    edited_dims: tuple[int, ...] = (0, 1)

    def unedited_mask(self, dim: int) -> np.ndarray:
        m = np.ones(dim, dtype=bool)
        m[list(self.edited_dims)] = False
        return m


@dataclass
class PairRecord:
    sample_pre: list[float]
    sample_post: list[float]
    spec: PairSpec
    consistency: float
    direction: str = FORWARD
    quality: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["spec"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["spec"].items()}
        return json.dumps(d, sort_keys=True)


def _noise(spec: PairSpec, dim: int, dtype) -> torch.Tensor:
    return normal(make_rng(spec.seed, 0x9A12), (1, dim), 1.0, dtype)


def paired_generate_batch(model, specs: list[PairSpec], cfg: FlowConfig, trajectories: bool = False):
    """Generate pairs for specs sharing one ``shared_steps`` value.

    The first ``S`` Euler steps run once under ``cond_pre``; the resulting
    state seeds both the pre- and post-edit continuations.
    """
    if not specs:
        return torch.zeros(0, model.cfg.data_dim), torch.zeros(0, model.cfg.data_dim), None
    S = specs[0].shared_steps
    if any(s.shared_steps != S for s in specs):
        raise ValueError("a batch must share one shared_steps value")
    if not 0 <= S <= cfg.n_steps:
        raise ValueError(f"shared_steps={S} outside [0, n_steps={cfg.n_steps}]")
    dim = model.cfg.data_dim
    x = torch.cat([_noise(s, dim, model.dtype) for s in specs])
    pre_lab = torch.tensor([s.cond_pre for s in specs], dtype=torch.long)
    post_lab = torch.tensor([s.cond_post for s in specs], dtype=torch.long)
    sched = cfg.schedule
    tr_shared, tr_pre, tr_post = ([], [], []) if trajectories else (None, None, None)
    with torch.no_grad():
        x = integrate(model, x, sched, pre_lab, cfg.cfg_scale, 0, S, tr_shared)
        pre = integrate(model, x, sched, pre_lab, cfg.cfg_scale, S, cfg.n_steps, tr_pre)
        post = integrate(model, x, sched, post_lab, cfg.cfg_scale, S, cfg.n_steps, tr_post)
    traj = None
    if trajectories:
        traj = {"shared": tr_shared, "pre": tr_pre, "post": tr_post}
    return pre, post, traj


def paired_generate(model, spec: PairSpec, cfg: FlowConfig):
    pre, post, _ = paired_generate_batch(model, [spec], cfg)
    return pre[0], post[0]


def consistency_score(a, b, unedited_mask) -> float | np.ndarray:
    """Mean squared difference over unedited dimensions (per row for 2-D input)."""
    mask = np.asarray(unedited_mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty unedited mask")
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    d = ((a - b) ** 2)[..., mask].mean(-1)
    return float(d) if np.ndim(d) == 0 else d


def sample_quality(sample, cond, dataset: str = "scene") -> float:
    """Distance of a sample to the target mean of its condition (lower is better)."""
    mean = target_means(dataset, np.asarray([cond]))[0]
    return float(np.linalg.norm(np.asarray(sample) - mean))


def filter_pairs(records, max_inconsistency: float, max_quality: float = float("inf"), quality_fn=None):
    """Keep records that are consistent enough and whose samples both sit near their targets."""
    quality_fn = quality_fn or (lambda r: max(r.quality.get("pre", 0.0), r.quality.get("post", 0.0)))
    return [r for r in records if r.consistency <= max_inconsistency and quality_fn(r) <= max_quality]


def invert_pair(r: PairRecord) -> PairRecord:
    if r.direction != FORWARD:
        raise ValueError("record is already inverted")
    spec = replace(r.spec, cond_pre=r.spec.cond_post, cond_post=r.spec.cond_pre)
    q = {"pre": r.quality.get("post"), "post": r.quality.get("pre")} if r.quality else {}
    return PairRecord(r.sample_post, r.sample_pre, spec, r.consistency, INVERTED, q)


def enumerate_specs(n: int, shared_steps: int, seed: int, n_objects: int = 8, n_backgrounds: int = 4) -> list[PairSpec]:
    """Object-replacement edits on the scene domain; the background is left unedited."""
    rng = make_rng(seed, 0x5BEC)
    specs = []
    for k in range(n):
        a = int(rng.integers(n_objects))
        a2 = int((a + 1 + rng.integers(n_objects - 1)) % n_objects)
        b = int(rng.integers(n_backgrounds))
        specs.append(PairSpec((a, b), (a2, b), shared_steps, int(seed * 1_000_003 + k) & 0xFFFFFFFF))
    return specs


def generate_records(model, specs, cfg: FlowConfig, dataset: str = "scene") -> list[PairRecord]:
    by_s: dict[int, list[int]] = {}
    for i, s in enumerate(specs):
        by_s.setdefault(s.shared_steps, []).append(i)
    out: list[PairRecord | None] = [None] * len(specs)
    dim = model.cfg.data_dim
    for S, idx in sorted(by_s.items()):
        batch = [specs[i] for i in idx]
        pre, post, _ = paired_generate_batch(model, batch, cfg)
        pre, post = pre.double().numpy(), post.double().numpy()
        for j, i in enumerate(idx):
            sp = specs[i]
            c = consistency_score(pre[j], post[j], sp.unedited_mask(dim))
            q = {"pre": sample_quality(pre[j], sp.cond_pre, dataset), "post": sample_quality(post[j], sp.cond_post, dataset)}
            out[i] = PairRecord(pre[j].tolist(), post[j].tolist(), sp, c, FORWARD, q)
    return out


def synth_dataset(model, specs, cfg: FlowConfig, out_path, max_inconsistency=float("inf"),
                  max_quality=float("inf"), dataset: str = "scene"):
    """generate -> score -> filter -> invert; writes ``pairs.jsonl`` and ``summary.json``."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_records(model, specs, cfg, dataset)
    kept = filter_pairs(records, max_inconsistency, max_quality)
    final = []
    for r in kept:
        final.extend([r, invert_pair(r)])
    written = 0
    try:
        with open(out / "pairs.jsonl", "w") as fh:
            for r in final:
                fh.write(r.to_json() + "\n")
                written += 1
    except OSError as exc:
        (out / "partial.json").write_text(json.dumps({"written": written, "expected": len(final), "error": str(exc)}))
        raise
    per_s: dict[int, list[float]] = {}
    for r in records:
        per_s.setdefault(r.spec.shared_steps, []).append(r.consistency)
    summary = {
        "n_generated": len(records),
        "n_kept": len(kept),
        "n_records": len(final),
        "mean_consistency": {str(s): float(np.mean(v)) for s, v in sorted(per_s.items())},
        "median_consistency": {str(s): float(np.median(v)) for s, v in sorted(per_s.items())},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return final, summary
