import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from sparseflow.cli import main, thread_cap


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: a small dataset, a tiny trained model, and a tiny
    distilled student, built once through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    spec = root / "task.json"
    spec.write_text(json.dumps({"seed": 0, "style_count": 4}))
    assert main(["gen_data", "--spec", str(spec), "--count", "6",
                 "--out", str(root / "data"), "--seed", "11",
                 "--len-min", "4", "--len-max", "6"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "model"),
                 "--steps", "12", "--layers", "1", "--heads", "2",
                 "--model-dim", "16", "--batch-size", "2", "--seed", "3",
                 "--loss-every", "5", "--checkpoint-every", "10"]) == 0
    assert main(["distill", "--teacher", str(root / "model" / "checkpoint"),
                 "--data", str(root / "data"), "--out", str(root / "student"),
                 "--steps", "6", "--k-windows", "2", "--teacher-steps", "2",
                 "--batch-size", "1", "--seed", "4"]) == 0
    return root


# ---------------------------------------------------------------------------
# gen_data
# ---------------------------------------------------------------------------


def test_gen_data_manifest_checksums(ws):
    manifest = json.loads((ws / "data" / "manifest.json").read_text())
    assert manifest["count"] == 6
    for name, digest in manifest["files"].items():
        actual = hashlib.sha256((ws / "data" / name).read_bytes()).hexdigest()
        assert actual == digest, name
    assert "dataset.jsonl" in manifest["files"]
    assert "task.json" in manifest["files"]


def test_gen_data_same_seed_same_checksums(ws, tmp_path):
    spec = ws / "task.json"
    assert main(["gen_data", "--spec", str(spec), "--count", "6",
                 "--out", str(tmp_path / "again"), "--seed", "11",
                 "--len-min", "4", "--len-max", "6"]) == 0
    a = json.loads((ws / "data" / "manifest.json").read_text())["files"]
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())["files"]
    assert a == b


def test_gen_data_seed_changes_data(ws, tmp_path):
    spec = ws / "task.json"
    assert main(["gen_data", "--spec", str(spec), "--count", "6",
                 "--out", str(tmp_path / "other"), "--seed", "12",
                 "--len-min", "4", "--len-max", "6"]) == 0
    a = json.loads((ws / "data" / "manifest.json").read_text())["files"]
    b = json.loads((tmp_path / "other" / "manifest.json").read_text())["files"]
    assert a["dataset.jsonl"] != b["dataset.jsonl"]


def test_gen_data_count_zero(tmp_path):
    assert main(["gen_data", "--count", "0", "--out", str(tmp_path / "empty")]) == 0
    manifest = json.loads((tmp_path / "empty" / "manifest.json").read_text())
    assert manifest["count"] == 0
    assert not any(n.startswith("utt_") for n in manifest["files"])


def test_gen_data_negative_count(tmp_path):
    assert main(["gen_data", "--count", "-1", "--out", str(tmp_path / "x")]) == 2


# ---------------------------------------------------------------------------
# train / distill artifacts
# ---------------------------------------------------------------------------


def test_train_artifacts(ws):
    losses = (ws / "model" / "losses.csv").read_text().splitlines()
    assert losses[0] == "step,loss"
    assert len(losses) > 1
    run = json.loads((ws / "model" / "run_config.json").read_text())
    assert run["command"] == "train"
    assert run["steps"] == 12  # flag beat the 20k default
    meta = json.loads((ws / "model" / "checkpoint" / "config.json").read_text())
    assert meta["config"]["task"]["vocab_size"] == 16
    assert meta["config"]["backbone"]["model_dim"] == 16


def test_distill_artifacts(ws):
    run = json.loads((ws / "student" / "run_config.json").read_text())
    assert run["command"] == "distill"
    assert run["k_windows"] == 2 and run["teacher_steps"] == 2
    meta = json.loads((ws / "student" / "checkpoint" / "config.json").read_text())
    assert meta["config"]["distill"]["k_windows"] == 2
    assert meta["config"]["backbone"] == json.loads(
        (ws / "model" / "checkpoint" / "config.json").read_text())["config"]["backbone"]


def test_config_file_precedence(ws, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"count": 3, "seed": 5}))
    assert main(["gen_data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    run = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert run["count"] == 3 and run["seed"] == 5  # file beat defaults
    assert main(["gen_data", "--config", str(cfg), "--count", "2",
                 "--out", str(tmp_path / "b")]) == 0
    run = json.loads((tmp_path / "b" / "run_config.json").read_text())
    assert run["count"] == 2 and run["seed"] == 5  # flag beat file


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def test_sample_idempotent_and_hashed(ws, tmp_path):
    args = ["sample", "--checkpoint", str(ws / "model" / "checkpoint"),
            "--data", str(ws / "data"), "--steps", "2", "--seed", "9"]
    assert main(args + ["--out", str(tmp_path / "s1")]) == 0
    assert main(args + ["--out", str(tmp_path / "s2")]) == 0
    b1 = (tmp_path / "s1" / "sample.bin").read_bytes()
    b2 = (tmp_path / "s2" / "sample.bin").read_bytes()
    assert b1 == b2
    payload = json.loads((tmp_path / "s1" / "sample.json").read_text())
    assert payload["sha256"] == hashlib.sha256(b1).hexdigest()
    assert payload["meta"]["steps"] == 2


def test_sample_seed_changes_output(ws, tmp_path):
    base = ["sample", "--checkpoint", str(ws / "model" / "checkpoint"),
            "--data", str(ws / "data"), "--steps", "2"]
    assert main(base + ["--seed", "9", "--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--seed", "10", "--out", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "sample.json").read_text())["sha256"]
    b = json.loads((tmp_path / "b" / "sample.json").read_text())["sha256"]
    assert a != b


def test_sample_student_windows(ws, tmp_path):
    assert main(["sample", "--checkpoint", str(ws / "student" / "checkpoint"),
                 "--data", str(ws / "data"), "--out", str(tmp_path / "w"),
                 "--windows", "2", "--seed", "9"]) == 0
    payload = json.loads((tmp_path / "w" / "sample.json").read_text())
    assert np.isfinite(payload["token_error_rate"])


def test_sample_bad_index(ws, tmp_path):
    assert main(["sample", "--checkpoint", str(ws / "model" / "checkpoint"),
                 "--data", str(ws / "data"), "--out", str(tmp_path / "x"),
                 "--index", "99"]) == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_oracle_zero_ter(ws, tmp_path):
    assert main(["eval", "--oracle", "--data", str(ws / "data"),
                 "--out", str(tmp_path / "e")]) == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert summary["token_error_rate"] == 0.0
    report = (tmp_path / "e" / "report.csv").read_text().splitlines()
    assert report[0].startswith("token_error_rate,")


def test_eval_model_deterministic(ws, tmp_path):
    args = ["eval", "--checkpoint", str(ws / "model" / "checkpoint"),
            "--data", str(ws / "data"), "--steps", "2", "--limit", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == \
        (tmp_path / "b" / "report.csv").read_bytes()


def test_eval_duration_sweep(ws, tmp_path):
    assert main(["eval", "--checkpoint", str(ws / "model" / "checkpoint"),
                 "--data", str(ws / "data"), "--out", str(tmp_path / "d"),
                 "--sweep", "duration", "--grid", "1.0,2.0", "--steps", "2",
                 "--limit", "2"]) == 0
    lines = (tmp_path / "d" / "report.csv").read_text().splitlines()
    assert lines[0] == "factor,duration_ratio,token_error_rate"
    assert lines[1].startswith("1.0,1.0,")
    assert lines[2].startswith("2.0,2.0,")


def test_eval_accent_sweep(ws, tmp_path):
    assert main(["eval", "--checkpoint", str(ws / "model" / "checkpoint"),
                 "--data", str(ws / "data"), "--out", str(tmp_path / "a"),
                 "--sweep", "accent", "--grid", "1.5,5.0", "--steps", "2",
                 "--limit", "4"]) == 0
    conf = (tmp_path / "a" / "confusion.csv").read_text().splitlines()
    assert conf[0] == "true\\pred,standard,accent"
    std = conf[1].split(",")
    acc = conf[2].split(",")
    assert std[2] == "0" and acc[1] == "0"  # oracle renders classify exactly
    rows = (tmp_path / "a" / "report.csv").read_text().splitlines()
    assert rows[0] == "alpha_txt,alpha_spk,distance_to_standard,accent_rate"


def test_eval_needs_model_or_oracle(ws, tmp_path):
    assert main(["eval", "--data", str(ws / "data"),
                 "--out", str(tmp_path / "x")]) == 2


# ---------------------------------------------------------------------------
# ablate / dump_attn
# ---------------------------------------------------------------------------


def test_ablate_rows(ws, tmp_path):
    entries = tmp_path / "entries.json"
    entries.write_text(json.dumps([
        {"name": "sparse", "checkpoint": str(ws / "model" / "checkpoint")},
        {"name": "bare", "checkpoint": str(ws / "model" / "checkpoint"),
         "mode": "none", "guidance": "none"}]))
    args = ["ablate", "--entries", str(entries), "--data", str(ws / "data"),
            "--steps", "2", "--noise-grid", "0.0,0.2", "--limit", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    lines = (tmp_path / "a" / "ablation.csv").read_text().splitlines()
    assert lines[0] == ("config,mode,guidance,token_error_rate,style_similarity,"
                        "ter_noise_0,ter_noise_20")
    assert len(lines) == 3
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == \
        (tmp_path / "b" / "ablation.csv").read_bytes()


def test_ablate_bad_entries(ws, tmp_path):
    entries = tmp_path / "bad.json"
    entries.write_text(json.dumps([{"name": "x"}]))
    assert main(["ablate", "--entries", str(entries), "--data", str(ws / "data"),
                 "--out", str(tmp_path / "x")]) == 2


def test_dump_attn(ws, tmp_path):
    assert main(["dump_attn", "--checkpoint", str(ws / "model" / "checkpoint"),
                 "--data", str(ws / "data"), "--out", str(tmp_path / "at"),
                 "--t", "0.5"]) == 0
    maps = list((tmp_path / "at").glob("attn_*.bin"))
    assert len(maps) == 2  # 1 layer x 2 heads
    assert main(["dump_attn", "--checkpoint", str(ws / "model" / "checkpoint"),
                 "--data", str(ws / "data"), "--out", str(tmp_path / "bad"),
                 "--t", "1.5"]) == 2


# ---------------------------------------------------------------------------
# exit codes and environment
# ---------------------------------------------------------------------------


def test_usage_errors():
    assert main(["sample", "--bogus"]) == 1
    assert main(["not_a_command"]) == 1
    assert main([]) == 1
    assert main(["sample"]) == 1  # missing required args


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["train", "--help"]) == 0
    capsys.readouterr()


def test_config_errors(ws, tmp_path):
    assert main(["eval", "--oracle", "--data", str(ws / "data"),
                 "--out", str(tmp_path / "a"), "--guidance", "none",
                 "--alpha-txt", "2.0"]) == 2
    assert main(["eval", "--oracle", "--data", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "b")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["gen_data", "--count", "0", "--out", str(tmp_path / "c"),
                 "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"guidance": "bogus"}))
    assert main(["eval", "--oracle", "--data", str(ws / "data"),
                 "--out", str(tmp_path / "d"), "--config", str(bad)]) == 2


def test_thread_cap_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SPARSEFLOW_THREADS", "abc")
    assert main(["gen_data", "--count", "0", "--out", str(tmp_path / "x")]) == 2
    monkeypatch.setenv("SPARSEFLOW_THREADS", "0")
    assert main(["gen_data", "--count", "0", "--out", str(tmp_path / "y")]) == 2
    monkeypatch.setenv("SPARSEFLOW_THREADS", "2")
    assert thread_cap() == 2
    assert main(["gen_data", "--count", "0", "--out", str(tmp_path / "z")]) == 0
    import os
    assert os.environ["OMP_NUM_THREADS"] == "2"
    monkeypatch.delenv("SPARSEFLOW_THREADS")
    assert thread_cap() is None


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sparseflow.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen_data" in proc.stdout


def test_predicted_durations_run(ws, tmp_path):
    assert main(["sample", "--checkpoint", str(ws / "model" / "checkpoint"),
                 "--data", str(ws / "data"), "--out", str(tmp_path / "p"),
                 "--steps", "2", "--duration", "predicted", "--seed", "9"]) == 0
    payload = json.loads((tmp_path / "p" / "sample.json").read_text())
    assert payload["duration_ratio"] > 0.0
