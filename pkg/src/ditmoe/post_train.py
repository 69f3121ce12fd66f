"""Joint few-step distillation and reward-guided post-training.

Three networks: a frozen multi-step teacher sampled with guidance, a few-step
guidance-free student, and a "fake" velocity model refit every step on fresh
student samples. The student's distillation direction is the difference of
the fake and teacher velocity predictions at re-noised student samples; the
reward term is advantage-signed flow matching on student rollouts.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .datasets import DATASETS, GMM_STD, SCENE_STD, gmm8_means, target_means
from .flow import FlowConfig, FlowModel, flow_loss, integrate, interpolate
from .numerics import make_rng, normal, tensor_hash
from .paired_synth import consistency_score

REWARD_COMPONENTS = ("edit_quality", "background_consistency", "visual_quality")


@dataclass
class JointConfig:
    lambda_dmd: float = 1.0
    lambda_nft: float = 0.5
    cold_start_steps: int = 500
    student_steps: int = 4
    teacher_steps: int = 30
    teacher_cfg_scale: float = 1.5
    group_size: int = 16
    n_groups: int = 8
    dmd_batch: int = 128
    beta: float = 0.5
    lr: float = 1e-4
    fake_lr: float = 1e-3
    fake_updates: int = 1
    t_min: float = 0.02
    t_max: float = 0.98
    eval_every: int = 25
    eval_conditions: int = 256

    def __post_init__(self):
        if self.cold_start_steps < 0:
            raise ValueError("cold_start_steps must be >= 0")
        if self.student_steps < 1:
            raise ValueError("student_steps must be >= 1")
        if self.lambda_dmd < 0 or self.lambda_nft < 0:
            raise ValueError("loss weights must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")

    @property
    def student_flow(self) -> FlowConfig:
        return FlowConfig(n_steps=self.student_steps, cfg_scale=1.0)

    @property
    def teacher_flow(self) -> FlowConfig:
        return FlowConfig(n_steps=self.teacher_steps, cfg_scale=self.teacher_cfg_scale)


@dataclass
class RewardSpec:
    components: list[tuple[str, float]] = field(
        default_factory=lambda: [("edit_quality", 0.6), ("background_consistency", 0.2), ("visual_quality", 0.2)]
    )

    def __post_init__(self):
        self.components = [(str(n), float(w)) for n, w in self.components]
        for name, w in self.components:
            if name not in REWARD_COMPONENTS:
                raise ValueError(f"unknown reward component {name!r}")
            if w < 0:
                raise ValueError(f"reward weight for {name} is negative")
        total = sum(w for _, w in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"reward weights must be nonnegative and sum to 1 (got {total})")


# --- rewards ------------------------------------------------------------------


def support_radius(dataset: str) -> float:
    if dataset in ("gmm8", "conditional_gmm"):
        return float(np.linalg.norm(gmm8_means(), axis=1).max() + 3 * GMM_STD * np.sqrt(2))
    if dataset == "scene":
        m = target_means("scene", np.array([[a, b] for a in range(8) for b in range(4)]))
        return float(np.linalg.norm(m, axis=1).max() + 3 * SCENE_STD * 2)
    raise ValueError(f"unknown dataset {dataset!r}")


def reward_components(samples, conditions, dataset: str = "scene", pre_samples=None, edited_dims=(0, 1)) -> dict:
    """Per-sample synthetic reward oracles (higher is better, 0 is the maximum)."""
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    target = target_means(dataset, np.asarray(conditions))
    out = {
        "edit_quality": -np.linalg.norm(x - target, axis=1),
        "visual_quality": -np.maximum(0.0, np.linalg.norm(x, axis=1) - support_radius(dataset)),
    }
    if pre_samples is None:
        out["background_consistency"] = np.zeros(len(x))
    else:
        mask = np.ones(x.shape[1], dtype=bool)
        mask[list(edited_dims)] = False
        out["background_consistency"] = -np.atleast_1d(consistency_score(x, np.asarray(pre_samples).reshape(x.shape), mask))
    return out


def fuse_rewards(components: dict, spec: RewardSpec) -> np.ndarray:
    for name, _ in spec.components:
        if name not in components:
            raise ValueError(f"reward component {name!r} was not computed")
    return sum(w * np.asarray(components[name], dtype=np.float64) for name, w in spec.components)


def normalize_rewards(raw) -> np.ndarray:
    """Batch z-score; all zeros when the batch has no spread."""
    raw = np.asarray(raw, dtype=np.float64)
    std = raw.std()
    if not std > 0:
        return np.zeros_like(raw)
    return (raw - raw.mean()) / std


def hybrid_reward(samples, conditions, spec: RewardSpec, dataset="scene", pre_samples=None):
    """(raw fused reward, normalised advantages) for a batch."""
    raw = fuse_rewards(reward_components(samples, conditions, dataset, pre_samples), spec)
    return raw, normalize_rewards(raw)


# --- distillation state -------------------------------------------------------


@dataclass
class DistillState:
    teacher: FlowModel
    student: FlowModel
    fake: FlowModel
    student_opt: torch.optim.Optimizer
    fake_opt: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    log: list[dict] = field(default_factory=list)

    def teacher_hash(self) -> str:
        return tensor_hash(self.teacher.state_dict().items())

    def series(self, name):
        rows = [r for r in self.log if r["name"] == name]
        return [r["step"] for r in rows], [r["value"] for r in rows]


def make_distill_state(teacher: FlowModel, cfg: JointConfig, seed: int) -> DistillState:
    teacher = copy.deepcopy(teacher)
    teacher.requires_grad_(False)
    teacher.eval()
    student = copy.deepcopy(teacher)
    student.requires_grad_(True)
    fake = copy.deepcopy(teacher)
    fake.requires_grad_(True)
    return DistillState(
        teacher, student, fake,
        torch.optim.AdamW(student.parameters(), lr=cfg.lr, weight_decay=0.0),
        torch.optim.AdamW(fake.parameters(), lr=cfg.fake_lr, weight_decay=0.0),
        make_rng(seed, 0xD15),
    )


def student_sample(state: DistillState, labels, cfg: JointConfig, noise=None, grad=False):
    """CFG-free few-step sampling: exactly ``student_steps`` student evaluations."""
    if noise is None:
        noise = normal(state.rng, (labels.shape[0], state.student.cfg.data_dim), 1.0, state.student.dtype)
    with torch.set_grad_enabled(grad):
        return integrate(state.student, noise, cfg.student_flow.schedule, labels, 1.0)


def teacher_sample(state: DistillState, labels, cfg: JointConfig, noise):
    with torch.no_grad():
        return integrate(state.teacher, noise, cfg.teacher_flow.schedule, labels, cfg.teacher_cfg_scale)


def fake_update(state: DistillState, x0, labels) -> float:
    loss = flow_loss(state.fake, x0.detach(), labels, state.rng)
    state.fake_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.fake_opt.step()
    return loss.item()


def dmd_direction(state: DistillState, x0, labels, cfg: JointConfig, t=None, eps=None):
    """Sample-space step toward the teacher distribution: ``t * (v_fake - v_teacher)``."""
    B = x0.shape[0]
    if t is None:
        t = torch.from_numpy(state.rng.uniform(cfg.t_min, cfg.t_max, B)).to(x0.dtype)
    if eps is None:
        eps = normal(state.rng, tuple(x0.shape), 1.0, x0.dtype)
    with torch.no_grad():
        xt, _ = interpolate(x0.detach(), eps, t)
        v_fake = state.fake(xt, t, labels)
        v_real = _guided_batch(state.teacher, xt, t, labels, cfg.teacher_cfg_scale)
    d = t[:, None] * (v_fake - v_real)
    if not torch.isfinite(d).all():
        raise FloatingPointError("non-finite velocity in distillation step")
    return d


def _guided_batch(model, x, t, labels, scale):
    v_c = model(x, t, labels)
    if scale == 1.0 or labels is None:
        return v_c
    v_u = model(x, t, model.null_labels(x.shape[0]))
    return v_u + scale * (v_c - v_u)


def dmd_loss(state: DistillState, labels, cfg: JointConfig, x0=None):
    """(surrogate loss for backward, mean squared direction magnitude).

    The surrogate's gradient w.r.t. the student sample is ``-direction``, so a
    descent step moves samples along it. Both velocity models are stop-grad.
    """
    if x0 is None:
        x0 = student_sample(state, labels, cfg, grad=True)
    d = dmd_direction(state, x0, labels, cfg)
    target = (x0 + d).detach()
    loss = 0.5 * ((x0 - target) ** 2).sum(-1).mean()
    return loss, (d ** 2).sum(-1).mean().item()


def nft_loss(student, samples, labels, advantages, rng, beta: float = 0.5, group_size: int | None = None,
             t=None, eps=None):
    """Advantage-signed contrastive flow matching.

    Positive-advantage samples are regressed toward as usual; negative ones
    regress toward the reflected target ``2 v_detached - v_target``, pushing
    the velocity field away from them.
    """
    if group_size is not None and group_size < 2:
        raise ValueError("reward groups need at least two rollouts for a variance estimate")
    x = samples.detach()
    A = torch.as_tensor(np.asarray(advantages), dtype=x.dtype)
    B = x.shape[0]
    if t is None:
        t = torch.from_numpy(rng.uniform(0.0, 1.0, B)).to(x.dtype)
    if eps is None:
        eps = normal(rng, tuple(x.shape), 1.0, x.dtype)
    xt, v_target = interpolate(x, eps, t)
    v = student(xt, t, labels)
    v_d = v.detach()
    pos = ((v - v_target) ** 2).mean(-1)
    neg = ((v - (2 * v_d - v_target)) ** 2).mean(-1)
    return (A.clamp_min(0) * pos + beta * (-A).clamp_min(0) * neg).mean()


# --- rollouts and the joint loop ------------------------------------------------


def edit_conditions(rng, n: int, dataset: str):
    """(pre, post) label pairs; for the scene domain the object is replaced."""
    if dataset == "scene":
        a = rng.integers(0, 8, n)
        a2 = (a + 1 + rng.integers(0, 7, n)) % 8
        b = rng.integers(0, 4, n)
        return np.stack([a, b], 1), np.stack([a2, b], 1)
    if dataset == "conditional_gmm":
        post = rng.integers(0, 8, n)[:, None]
        return None, post
    raise ValueError(f"no edit task for dataset {dataset!r}")


def rollout_rewards(sampler, pre_lab, post_lab, noise, spec: RewardSpec, dataset):
    post = sampler(torch.from_numpy(post_lab).long(), noise)
    pre = None
    if pre_lab is not None:
        pre = sampler(torch.from_numpy(pre_lab).long(), noise).detach().double().numpy()
    raw, adv = hybrid_reward(post.detach().double().numpy(), post_lab, spec, dataset, pre)
    return post, raw, adv


class EvalSet:
    def __init__(self, cfg: JointConfig, dataset: str, dim: int, seed: int, dtype):
        rng = make_rng(seed, 0xE7A2)
        self.pre, self.post = edit_conditions(rng, cfg.eval_conditions, dataset)
        self.noise = normal(rng, (cfg.eval_conditions, dim), 1.0, dtype)


def nft_term(state: DistillState, cfg: JointConfig, spec: RewardSpec, dataset: str):
    """Roll out groups from the student, score them, and build the NFT loss."""
    G, n = cfg.group_size, cfg.n_groups
    pre_u, post_u = edit_conditions(state.rng, n, dataset)
    post_lab = np.repeat(post_u, G, 0)
    pre_lab = None if pre_u is None else np.repeat(pre_u, G, 0)
    noise = normal(state.rng, (n * G, state.student.cfg.data_dim), 1.0, state.student.dtype)
    sampler = lambda lab, z: student_sample(state, lab, cfg, noise=z)
    x, raw, adv = rollout_rewards(sampler, pre_lab, post_lab, noise, spec, dataset)
    loss = nft_loss(state.student, x, torch.from_numpy(post_lab).long(), adv, state.rng, cfg.beta, G)
    return loss, float(raw.mean())


def nft_gate(step: int, cfg: JointConfig) -> float:
    return 0.0 if step < cfg.cold_start_steps else 1.0


def nft_gradient_contribution(state: DistillState, cfg: JointConfig, spec: RewardSpec, dataset: str, step: int):
    """Gradients of the gated NFT term alone w.r.t. the student parameters."""
    loss, _ = nft_term(state, cfg, spec, dataset)
    params = [p for p in state.student.parameters() if p.requires_grad]
    grads = torch.autograd.grad(nft_gate(step, cfg) * cfg.lambda_nft * loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def mean_reward(sampler, ev: EvalSet, spec: RewardSpec, dataset: str) -> float:
    _, raw, _ = rollout_rewards(sampler, ev.pre, ev.post, ev.noise, spec, dataset)
    return float(raw.mean())


def joint_train(state: DistillState, cfg: JointConfig, spec: RewardSpec | None, steps: int,
                dataset: str = "scene", use_nft: bool = True, sink=None, eval_seed: int = 0) -> DistillState:
    """Distillation every step; the reward term joins after ``cold_start_steps``."""
    spec = spec or RewardSpec()
    if dataset not in DATASETS:
        raise ValueError(f"unknown dataset {dataset!r}")
    data_dim = state.student.cfg.data_dim
    ev = EvalSet(cfg, dataset, data_dim, eval_seed, state.student.dtype)

    def emit(name, value):
        rec = {"step": state.step, "name": name, "value": float(value)}
        state.log.append(rec)
        if sink is not None:
            sink(rec)

    teacher_ref = mean_reward(lambda lab, z: teacher_sample(state, lab, cfg, z), ev, spec, dataset)
    student_eval = lambda lab, z: student_sample(state, lab, cfg, noise=z)

    def evaluate():
        emit("student_reward", mean_reward(student_eval, ev, spec, dataset))
        emit("teacher_reward_ref", teacher_ref)

    if state.step == 0:
        evaluate()
    for _ in range(steps):
        _, post = edit_conditions(state.rng, cfg.dmd_batch, dataset)
        labels = torch.from_numpy(post).long()
        x0 = student_sample(state, labels, cfg, grad=True)
        for _ in range(cfg.fake_updates):
            fl = fake_update(state, x0, labels)
        loss_dmd, mag = dmd_loss(state, labels, cfg, x0=x0)
        total = cfg.lambda_dmd * loss_dmd
        gate = nft_gate(state.step, cfg)
        if use_nft and gate > 0 and cfg.lambda_nft > 0:
            loss_nft, roll_reward = nft_term(state, cfg, spec, dataset)
            total = total + gate * cfg.lambda_nft * loss_nft
            emit("nft_loss", loss_nft.item())
            emit("rollout_reward", roll_reward)
        if not torch.isfinite(total):
            raise FloatingPointError(f"non-finite joint loss at step {state.step}")
        state.student_opt.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(state.student.parameters(), 1.0)
        state.student_opt.step()
        state.step += 1
        emit("dmd_direction_sq", mag)
        emit("fake_loss", fl)
        if state.step % cfg.eval_every == 0:
            evaluate()
    return state


def count_evaluations(model, fn) -> int:
    before = model.n_evals
    fn()
    return model.n_evals - before
