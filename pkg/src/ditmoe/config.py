"""Experiment configuration: one JSON document with named sections.

Every section is a dataclass. Parsing collects *all* schema problems (unknown
keys, wrong types, domain violations) before raising, so a bad file is
reported in one pass.
"""

from __future__ import annotations

import json
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class ArchSection:
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    ffn: str = "E16A4"
    d_expert: int = 16
    n_shared: int = 1
    d_shared: int | None = None
    d_ff: int = 136
    activation: str = "gelu"


@dataclass
class RouterSection:
    bias_step: float = 1e-3
    affinity_floor: float = 1e-12


@dataclass
class DataSection:
    dataset: str = "gmm8"
    n_train: int = 20000
    n_eval: int = 1000


@dataclass
class ModelSection:
    encoder: str = "weak"
    injection: str = "in_context"
    rich_tokens: int = 2
    patch: int = 2


@dataclass
class TrainSection:
    steps: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    cond_drop_prob: float = 0.1
    eval_every: int = 100
    eval_size: int = 4096
    sample_steps: int = 30
    cfg_scale: float = 1.0


@dataclass
class UpcycleSection:
    strategy: str = "expert_attn"
    drop_ratio: float = 0.5
    sampler: str = "random"
    base_seed: int = 0
    dense_checkpoint: str | None = None


@dataclass
class PairedSection:
    n_specs: int = 64
    n_steps: int = 20
    shared_fractions: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    max_inconsistency: float | None = None
    max_quality: float | None = None
    cfg_scale: float = 1.0


@dataclass
class RewardSection:
    edit_quality: float = 0.6
    background_consistency: float = 0.2
    visual_quality: float = 0.2


@dataclass
class JointSection:
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
    eval_every: int = 25
    eval_conditions: int = 256
    steps: int = 1000
    use_nft: bool = True
    dataset: str = "scene"
    teacher_train_steps: int = 2000
    rewards: RewardSection = field(default_factory=RewardSection)


@dataclass
class BenchSection:
    configs: list = field(default_factory=lambda: ["E16A4"])
    token_counts: list = field(default_factory=lambda: [1024, 2048, 4096])
    d_model: int = 16
    d_expert: int = 8
    trials: int = 30
    naive: bool = True
    step_time: bool = False
    step_batch: int = 2048


@dataclass
class RouteSimSection:
    n_routed: int = 16
    top_k: int = 2
    d_model: int = 16
    tokens_per_update: int = 4096
    updates: int = 500
    skew: float = 1.5
    bias_steps: list = field(default_factory=lambda: [0.0, 1e-3])


@dataclass
class AblateSection:
    recipe: str = "moe-vs-dense"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    quick: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    f64: bool = False
    workers: int = 1
    arch: ArchSection = field(default_factory=ArchSection)
    router: RouterSection = field(default_factory=RouterSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    upcycle: UpcycleSection = field(default_factory=UpcycleSection)
    paired: PairedSection = field(default_factory=PairedSection)
    joint: JointSection = field(default_factory=JointSection)
    bench: BenchSection = field(default_factory=BenchSection)
    route_sim: RouteSimSection = field(default_factory=RouteSimSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    # builders for the library-level configs ------------------------------------

    def arch_config(self, **over):
        from .moe_block import ArchConfig

        return ArchConfig(**{**asdict(self.arch), **over})

    def reward_spec(self):
        from .post_train import RewardSpec

        return RewardSpec([(k, v) for k, v in asdict(self.joint.rewards).items()])

    def joint_config(self):
        from .post_train import JointConfig

        keep = {f.name for f in fields(JointConfig)}
        return JointConfig(**{k: v for k, v in asdict(self.joint).items() if k in keep})


def _type_ok(value, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is list or origin is list:
        return isinstance(value, list)
    if isinstance(hint, type):
        return isinstance(value, hint)
    return True


def _build(cls, data, path: str, errors: list[str]):
    if not isinstance(data, dict):
        errors.append(f"{path or '<root>'}: expected an object, found {type(data).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in sorted(set(data) - names):
        errors.append(f"{path}{key}: unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value, hint = data[f.name], hints[f.name]
        if is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, f"{path}{f.name}.", errors)
        elif not _type_ok(value, hint):
            errors.append(f"{path}{f.name}: expected {getattr(hint, '__name__', hint)}, found {type(value).__name__} ({value!r})")
        else:
            kwargs[f.name] = float(value) if hint is float else value
    return cls(**kwargs)


def _domain_errors(cfg: ExperimentConfig) -> list[str]:
    from .datasets import DATASETS
    from .moe_block import _MOE_NAME
    from .upcycle import SAMPLERS, STRATEGIES

    errs = []
    a = cfg.arch
    if a.ffn != "dense":
        m = _MOE_NAME.match(a.ffn)
        if not m:
            errs.append(f"arch.ffn: expected 'dense' or E<N>A<K>, found {a.ffn!r}")
        else:
            n, k = int(m.group(1)), int(m.group(2))
            if k > n:
                errs.append(f"arch.ffn: top_k (K_r={k}) must not exceed n_routed (N_r={n})")
            if k < 1:
                errs.append("arch.ffn: top_k (K_r) must be >= 1")
    for name in ("d_model", "n_blocks", "n_heads", "d_expert", "d_ff"):
        if getattr(a, name) < 1:
            errs.append(f"arch.{name}: must be >= 1")
    if a.n_heads >= 1 and a.d_model % a.n_heads:
        errs.append("arch.n_heads: must divide arch.d_model")
    if cfg.router.bias_step < 0:
        errs.append("router.bias_step: must be >= 0")
    if cfg.router.affinity_floor < 0:
        errs.append("router.affinity_floor: must be >= 0")
    if cfg.data.dataset not in DATASETS:
        errs.append(f"data.dataset: expected one of {DATASETS}, found {cfg.data.dataset!r}")
    if cfg.model.encoder not in ("weak", "rich"):
        errs.append(f"model.encoder: expected weak|rich, found {cfg.model.encoder!r}")
    if cfg.model.injection not in ("in_context", "cross_attention"):
        errs.append(f"model.injection: expected in_context|cross_attention, found {cfg.model.injection!r}")
    if cfg.upcycle.strategy not in STRATEGIES:
        errs.append(f"upcycle.strategy: expected one of {STRATEGIES}, found {cfg.upcycle.strategy!r}")
    if cfg.upcycle.sampler not in SAMPLERS:
        errs.append(f"upcycle.sampler: expected one of {SAMPLERS}, found {cfg.upcycle.sampler!r}")
    if not 0 <= cfg.upcycle.drop_ratio <= 1:
        errs.append("upcycle.drop_ratio: must lie in [0, 1]")
    if any(not 0 <= f <= 1 for f in cfg.paired.shared_fractions):
        errs.append("paired.shared_fractions: every entry must lie in [0, 1]")
    w = asdict(cfg.joint.rewards)
    if any(v < 0 for v in w.values()) or abs(sum(w.values()) - 1.0) > 1e-9:
        errs.append(f"joint.rewards: RewardSpec weights must be nonnegative and sum to 1 (found sum {sum(w.values()):g})")
    if cfg.joint.group_size < 2:
        errs.append("joint.group_size: must be >= 2 (reward groups need a variance estimate)")
    if cfg.joint.cold_start_steps < 0:
        errs.append("joint.cold_start_steps: must be >= 0")
    if cfg.joint.student_steps < 1:
        errs.append("joint.student_steps: must be >= 1")
    if cfg.joint.dataset not in ("scene", "conditional_gmm"):
        errs.append(f"joint.dataset: expected scene|conditional_gmm, found {cfg.joint.dataset!r}")
    if cfg.workers < 1:
        errs.append("workers: must be >= 1")
    if cfg.bench.trials < 30:
        errs.append("bench.trials: must be >= 30")
    from .experiments import RECIPES

    if cfg.ablate.recipe not in RECIPES:
        errs.append(f"ablate.recipe: expected one of {sorted(RECIPES)}, found {cfg.ablate.recipe!r}")
    return errs


def config_from_dict(data: dict) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _build(ExperimentConfig, data, "", errors)
    # fields that failed the type check kept their defaults, so domain checks are safe
    errors += _domain_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"{p}: config file not found"])
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{p}: not valid JSON ({exc})"]) from exc
    return config_from_dict(data)
