import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    from ditmoe.numerics import make_rng

    return make_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: exit-criterion runs (slow)")
    config.addinivalue_line("markers", "slow: multi-second training runs")


# Tiny settings that keep every CLI subcommand to a few seconds.
SMALL_CONFIG = {
    "arch": {"d_model": 16, "n_blocks": 1, "n_heads": 2, "ffn": "E8A2", "d_expert": 8},
    "train": {"steps": 20, "eval_every": 10, "eval_size": 256, "batch_size": 64},
    "data": {"n_train": 2000},
    "paired": {"n_specs": 4, "n_steps": 8},
    "joint": {"steps": 6, "teacher_train_steps": 20, "cold_start_steps": 3, "group_size": 4, "n_groups": 2,
              "dmd_batch": 16, "eval_conditions": 16, "eval_every": 2, "teacher_steps": 6},
    "bench": {"token_counts": [64], "trials": 30},
    "route_sim": {"updates": 30, "tokens_per_update": 256},
}

DENSE_CONFIG = {
    "arch": {"d_model": 16, "n_blocks": 1, "n_heads": 2, "ffn": "dense", "d_ff": 64},
    "train": {"steps": 20, "eval_every": 10, "eval_size": 256, "batch_size": 64},
    "data": {"n_train": 2000},
}


@pytest.fixture
def write_config(tmp_path):
    import copy
    import json

    def _write(base, name="cfg.json", **sections):
        d = copy.deepcopy(base)
        for k, v in sections.items():
            d.setdefault(k, {}).update(v) if isinstance(v, dict) else d.__setitem__(k, v)
        p = tmp_path / name
        p.write_text(json.dumps(d))
        return str(p)

    return _write
