import csv
import hashlib
import io
import json
import subprocess
import sys

import pytest

from synernet.cli import main

FAST = ["--epochs", "10"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), "--K", "4", "--K", "16"]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    d = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(d), "--K", "4", *FAST]) == 0
    return d


def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_synth_writes_manifest_and_splits(data_dir):
    names = {p.name for p in data_dir.iterdir()}
    assert {"manifest.json", "samples.f32", "encoders.f32", "split_K4_s0.json", "split_K16_s0.json"} <= names


def test_train_outputs(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"adapter.json", "adapter.f32", "training_log.csv", "trace.jsonl", "report.json",
            "embeddings_dump.f32", "embeddings_dump.json"} <= names
    rep = json.loads((run_dir / "report.json").read_text())
    assert rep["split"]["K"] == 4 and rep["config"]["train"]["K"] == 4
    assert rep["config"]["train"]["epochs"] == 10
    for k, v in rep["accuracy"].items():
        assert 0.0 <= v <= 1.0, k
    with open(run_dir / "training_log.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 10


def test_eval_reproduces_train_report(tmp_path, data_dir, run_dir):
    assert main(["eval", "--data", str(data_dir), "--run", str(run_dir), "--out", str(tmp_path)]) == 0
    ev = json.loads((tmp_path / "eval.json").read_text())
    rep = json.loads((run_dir / "report.json").read_text())
    assert ev["results"] == rep["results"]["trained"]


def test_config_echo_reproduces_run(tmp_path, data_dir, run_dir):
    rep = json.loads((run_dir / "report.json").read_text())
    (tmp_path / "cfg.yaml").write_text(json.dumps(rep["config"]))
    assert main(["train", "--data", str(data_dir), "--config", str(tmp_path / "cfg.yaml"), "--out", str(tmp_path / "r")]) == 0
    again = json.loads((tmp_path / "r" / "report.json").read_text())
    assert again["accuracy"] == rep["accuracy"]
    assert again["adapter_hash"] == rep["adapter_hash"]


def test_report_is_read_only(tmp_path, run_dir, capsys):
    before = _digest(run_dir)
    assert main(["report", str(run_dir)]) == 0
    first = capsys.readouterr().out
    assert main(["report", str(run_dir), "--out", str(tmp_path / "s.csv")]) == 0
    with open(tmp_path / "s.csv") as fh:
        assert list(csv.DictReader(fh)) == list(csv.DictReader(io.StringIO(first)))
    assert _digest(run_dir) == before
    rows = list(csv.DictReader(io.StringIO(first)))
    assert rows[0]["K"] == "4" and rows[0]["variant"] == "full"


def test_gradcheck_command(data_dir, capsys):
    assert main(["gradcheck", "--data", str(data_dir)]) == 0
    assert "max_rel_err=" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert main(["bogus"]) == 2
    assert main(["train", "--out", "x", "--K", "3"]) == 2
    assert main(["eval", "--set", "train.nope=1"]) == 2
    err = capsys.readouterr().err
    assert "error kind=UsageError code=2" in err and "error kind=ConfigError code=2" in err


def test_corrupted_dataset_is_an_invariant_failure(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) == 0
    raw = bytearray((tmp_path / "samples.f32").read_bytes())
    raw[10] ^= 0xFF
    (tmp_path / "samples.f32").write_bytes(bytes(raw))
    assert main(["eval", "--data", str(tmp_path)]) == 3
    assert "code=3" in capsys.readouterr().err


def test_backbone_mismatch_is_an_invariant_failure(run_dir, capsys):
    # adapter trained on the seed-0 benchmark, evaluated against a seed-1 benchmark
    assert main(["eval", "--run", str(run_dir), "--set", "benchmark.seed=1"]) == 3
    assert "InvariantError" in capsys.readouterr().err


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("SYNERNET_SEED", "5")
    assert main(["synth", "--out", str(tmp_path / "a")]) == 0
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["seed"] == 5
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 2
    monkeypatch.setenv("SYNERNET_SEED", "x")
    assert main(["synth", "--out", str(tmp_path / "c")]) == 2


def test_ablate_and_report(tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--out", str(out), "--seeds", "1", "--set", "train.epochs=3"]) == 0
    with open(out / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 9
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert len(list(csv.DictReader(io.StringIO(capsys.readouterr().out)))) == 9


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "synernet", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
