import json
from pathlib import Path

import pytest

from conftest import DENSE_CONFIG, SMALL_CONFIG
from ditmoe.cli import build_report, main
from ditmoe.numerics import file_sha256


def _manifest(out) -> dict:
    return json.loads((Path(out) / "manifest.json").read_text())


def _metrics(out) -> list[dict]:
    return [json.loads(line) for line in (Path(out) / "metrics.jsonl").read_text().splitlines()]


def test_train_writes_manifest_with_hashes(tmp_path, write_config):
    out = tmp_path / "run"
    assert main(["train", "--config", write_config(SMALL_CONFIG), "--out", str(out), "--f64"]) == 0
    doc = _manifest(out)
    assert doc["status"] == "ok"
    listed = {f["path"] for f in doc["files"]}
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    assert listed == on_disk
    for f in doc["files"]:
        assert f["sha256"] == file_sha256(out / f["path"])
    assert {"config.json", "metrics.jsonl", "summary.json", "checkpoint/manifest", "checkpoint/blob.bin"} <= listed


def test_metrics_records_carry_run_id(tmp_path, write_config):
    out = tmp_path / "run"
    main(["train", "--config", write_config(SMALL_CONFIG), "--out", str(out)])
    recs = _metrics(out)
    rid = _manifest(out)["run_id"]
    assert recs and all(set(r) == {"run_id", "step", "name", "value"} and r["run_id"] == rid for r in recs)
    names = {r["name"] for r in recs}
    assert {"loss", "eval_loss", "max_over_mean", "selection_entropy", "bias_inf_norm"} <= names


def test_output_location_does_not_change_hashes(tmp_path, write_config):
    cfg = write_config(SMALL_CONFIG)
    main(["route-sim", "--config", cfg, "--out", str(tmp_path / "a"), "--f64"])
    main(["route-sim", "--config", cfg, "--out", str(tmp_path / "deep" / "b"), "--f64"])
    assert _manifest(tmp_path / "a")["content_hash"] == _manifest(tmp_path / "deep" / "b")["content_hash"]


def test_seed_flag_changes_output(tmp_path, write_config):
    cfg = write_config(SMALL_CONFIG)
    main(["route-sim", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["route-sim", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
    assert _manifest(tmp_path / "a")["content_hash"] != _manifest(tmp_path / "b")["content_hash"]


def test_route_sim_two_telemetry_files(tmp_path, write_config):
    out = tmp_path / "rs"
    cfg = write_config(SMALL_CONFIG, route_sim={"updates": 150, "tokens_per_update": 1024})
    assert main(["route-sim", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "telemetry_gamma_0.jsonl").exists() and (out / "telemetry_gamma_0.001.jsonl").exists()
    s = json.loads((out / "summary.json").read_text())
    assert s["0.001"]["final_max_over_mean"] < s["0.0"]["final_max_over_mean"]
    rec = json.loads((out / "decisions_gamma_0.001.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"token", "selected", "gates"} and len(rec["selected"]) == 2


def test_config_error_is_structured(tmp_path, write_config, capsys):
    cfg = write_config(SMALL_CONFIG, arch={"ffn": "E2A4"}, joint={"rewards": {"edit_quality": 0.9}})
    code = main(["train", "--config", cfg, "--out", str(tmp_path / "x")])
    assert code == 2
    rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert rec["event"] == "error" and rec["type"] == "ConfigError"
    assert len(rec["errors"]) == 2
    assert not (tmp_path / "x").exists()


def test_runtime_error_writes_error_record(tmp_path, write_config, capsys):
    out = tmp_path / "up"
    code = main(["upcycle", "--config", write_config(SMALL_CONFIG), "--out", str(out)])
    assert code == 1
    err = json.loads((out / "error.json").read_text())
    assert err["type"] == "UpcycleError" and "dense_checkpoint" in err["message"]
    assert _manifest(out)["status"] == "error"


def test_upcycle_from_trained_dense(tmp_path, write_config):
    dense_out = tmp_path / "dense"
    assert main(["train", "--config", write_config(DENSE_CONFIG, "d.json"), "--out", str(dense_out), "--f64"]) == 0
    cfg = write_config(SMALL_CONFIG, upcycle={"dense_checkpoint": str(dense_out / "checkpoint")})
    out = tmp_path / "moe"
    assert main(["upcycle", "--config", cfg, "--out", str(out), "--f64"]) == 0
    rep = json.loads((out / "coverage_report.json").read_text())
    assert rep["strategy"] == "expert_attn"
    assert all(b["distinct"] for b in rep["blocks"])
    assert (out / "moe_checkpoint" / "blob.bin").exists()


def test_distill_flags_override_config(tmp_path, write_config):
    out = tmp_path / "d"
    cfg = write_config(SMALL_CONFIG)
    assert main(["distill", "--config", cfg, "--out", str(out), "--lambda-nft", "0.25", "--no-use-nft"]) == 0
    written = json.loads((out / "config.json").read_text())
    assert written["joint"]["lambda_nft"] == 0.25 and written["joint"]["use_nft"] is False
    names = {r["name"] for r in _metrics(out)}
    assert {"student_reward", "teacher_reward_ref"} <= names
    assert "nft_loss" not in names
    assert json.loads((out / "summary.json").read_text())["teacher_hash_unchanged"]


def test_bench_gate_and_volatile_timings(tmp_path, write_config):
    out = tmp_path / "b"
    assert main(["bench", "--config", write_config(SMALL_CONFIG), "--out", str(out)]) == 0
    assert json.loads((out / "gate.json").read_text())["passed"]
    vol = {f["path"] for f in _manifest(out)["files"] if f["volatile"]}
    assert vol == {"bench.jsonl", "bench.txt"}


def test_pair_synth_doubles_records(tmp_path, write_config):
    out = tmp_path / "p"
    assert main(["pair-synth", "--config", write_config(SMALL_CONFIG), "--out", str(out)]) == 0
    s = json.loads((out / "pairs" / "summary.json").read_text())
    assert s["n_records"] == 2 * s["n_kept"]
    assert s["mean_consistency"]["8"] == 0.0


def test_ablate_quick_writes_verdict(tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "route-sim", "--quick", "--seed", "0", "--out", str(out)]) == 0
    v = json.loads((out / "verdict.json").read_text())
    assert v["criterion"] == 4 and isinstance(v["passed"], bool)
    assert "criterion 4" in (out / "table.txt").read_text()


def test_report_on_empty_dir(tmp_path):
    text = build_report(tmp_path)
    assert "no runs" in text
    assert "##" not in text


def test_report_is_hash_stable_and_lists_every_criterion(tmp_path, write_config):
    cfg = write_config(SMALL_CONFIG)
    main(["route-sim", "--config", cfg, "--out", str(tmp_path / "runs" / "a"), "--f64"])
    main(["route-sim", "--config", cfg, "--out", str(tmp_path / "runs" / "b"), "--f64"])
    r1 = build_report(tmp_path / "runs")
    r2 = build_report(tmp_path / "runs")
    assert r1 == r2
    for n in range(1, 14):
        assert sum(line.startswith(f"- [{n}]") for line in r1.splitlines()) == 1
    assert "- [13]" in r1 and "PASS (1 repeated run ids)" in r1


def test_report_flags_incomplete_runs(tmp_path, write_config):
    main(["upcycle", "--config", write_config(SMALL_CONFIG), "--out", str(tmp_path / "bad")])
    assert "(INCOMPLETE)" in build_report(tmp_path)


def test_report_subcommand_writes_file(tmp_path):
    assert main(["report", str(tmp_path)]) == 0
    assert (tmp_path / "report.md").read_text().startswith("# Run report")
