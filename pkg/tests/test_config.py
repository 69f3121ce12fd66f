import json

import pytest
from hypothesis import given, strategies as st

from ditmoe.config import ConfigError, ExperimentConfig, config_from_dict, parse_config


def test_minimal_file_fills_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    cfg = parse_config(p)
    assert cfg == ExperimentConfig()
    assert config_from_dict(json.loads(cfg.to_json())) == cfg


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.json")


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{arch:")
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config(p)


def test_k_above_n_names_both_fields():
    with pytest.raises(ConfigError) as e:
        config_from_dict({"arch": {"ffn": "E4A8"}})
    assert len(e.value.errors) == 1
    msg = e.value.errors[0]
    assert "top_k" in msg and "n_routed" in msg and "arch.ffn" in msg


def test_reward_weights_must_sum_to_one():
    with pytest.raises(ConfigError, match="RewardSpec weights must be nonnegative and sum to 1"):
        config_from_dict({"joint": {"rewards": {"edit_quality": 0.5}}})


def test_unknown_keys_rejected_at_every_level():
    with pytest.raises(ConfigError) as e:
        config_from_dict({"bogus": 1, "arch": {"d_modle": 4}})
    assert "bogus: unknown key" in e.value.errors
    assert "arch.d_modle: unknown key" in e.value.errors


def test_all_errors_reported_at_once():
    bad = {"arch": {"ffn": "E2A4", "d_model": "big"}, "router": {"bias_step": -1.0}, "data": {"dataset": "mnist"},
           "extra": True}
    with pytest.raises(ConfigError) as e:
        config_from_dict(bad)
    text = "\n".join(e.value.errors)
    for needle in ("arch.ffn", "arch.d_model: expected int, found str", "router.bias_step", "data.dataset", "extra"):
        assert needle in text
    assert len(e.value.errors) == 5


def test_type_errors_name_expected_and_found():
    with pytest.raises(ConfigError) as e:
        config_from_dict({"train": {"steps": 1.5}})
    assert e.value.errors == ["train.steps: expected int, found float (1.5)"]


def test_bool_is_not_an_int():
    with pytest.raises(ConfigError):
        config_from_dict({"seed": True})


def test_unknown_recipe():
    with pytest.raises(ConfigError, match="ablate.recipe"):
        config_from_dict({"ablate": {"recipe": "nope"}})


def test_int_promotes_to_float():
    cfg = config_from_dict({"router": {"bias_step": 0}})
    assert isinstance(cfg.router.bias_step, float)


def test_builders():
    cfg = config_from_dict({"arch": {"ffn": "E8A2", "d_expert": 4}, "joint": {"lambda_nft": 2.0}})
    assert cfg.arch_config().n_routed == 8
    assert cfg.joint_config().lambda_nft == 2.0
    assert sum(w for _, w in cfg.reward_spec().components) == pytest.approx(1.0)


@given(
    seed=st.integers(0, 2**63),
    steps=st.integers(1, 10**6),
    gamma=st.floats(0, 1, allow_nan=False),
    n=st.integers(1, 64),
    data=st.data(),
)
def test_round_trip_is_bit_exact(seed, steps, gamma, n, data):
    k = data.draw(st.integers(1, n))
    cfg = config_from_dict({"seed": seed, "train": {"steps": steps}, "router": {"bias_step": gamma},
                            "arch": {"ffn": f"E{n}A{k}"}})
    text = cfg.to_json()
    back = config_from_dict(json.loads(text))
    assert back == cfg and back.to_json() == text
