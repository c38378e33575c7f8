import json

import pytest

from mtcnet.cli import run
from mtcnet.config import read_resolved


def test_usage_errors_exit_two(tmp_path, capsys):
    assert run(["frobnicate"]) == 2
    assert run(["gen-data", "--bogus"]) == 2
    assert run(["gen-data", "--n", "2", "--out", str(tmp_path), "--set", "colour=red"]) == 2
    assert run(["gen-data", "--n", "2", "--out", str(tmp_path), "--set", "seed"]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_help_exits_zero():
    assert run(["--help"]) == 0


def test_domain_error_exits_one(tmp_path, capsys):
    assert run(["train", "--preset", "tiny", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "m")]) == 1
    assert (tmp_path / "m" / "config.resolved").exists() and (tmp_path / "m" / "mtc.log").exists()
    assert capsys.readouterr().err.count("DatasetFormatError") == 1


def test_gen_data_contract(tmp_path, monkeypatch):
    monkeypatch.delenv("MTC_SEED", raising=False)
    out = tmp_path / "data"
    assert run(["gen-data", "--seed", "7", "--n", "5", "--out", str(out), "--preset", "tiny"]) == 0
    assert len(list(out.glob("scene_*.bin"))) == 5 and (out / "manifest.jsonl").exists()
    assert read_resolved(out / "config.resolved").seed == 7
    monkeypatch.setenv("MTC_SEED", "11")
    assert run(["gen-data", "--seed", "7", "--n", "1", "--out", str(tmp_path / "d2"), "--preset", "tiny"]) == 0
    assert read_resolved(tmp_path / "d2" / "config.resolved").seed == 11


def test_config_file_flag(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nimage_size = 16\ncell = 4\nmax_vehicles = 6\n")
    assert run(["gen-data", "--config", str(cfg), "--n", "2", "--out", str(tmp_path / "d")]) == 0
    assert read_resolved(tmp_path / "d" / "config.resolved").image_size == 16


def test_pipeline_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("MTC_SEED", raising=False)
    d, m, e = tmp_path / "data", tmp_path / "model", tmp_path / "eval"
    tiny = ["--preset", "tiny", "--set", "steps=5"]
    assert run(["gen-data", "--n", "6", "--out", str(d), *tiny]) == 0
    assert run(["build-trm", "--data", str(d), "--out", str(tmp_path / "bank.trmb"), *tiny]) == 0
    assert run(["train", "--data", str(d), "--bank", str(tmp_path / "bank.trmb"), "--out", str(m), *tiny]) == 0
    assert (m / "weights.mtcw").exists() and (m / "trace.csv").read_text().count("\n") == 6
    capsys.readouterr()
    assert run(["eval", "--model", str(m), "--data", str(d), "--out", str(e), *tiny]) == 0
    first = capsys.readouterr().out
    assert first.startswith("oa=")
    report = json.loads((e / "report.json").read_text())
    assert set(report) >= {"oa", "aa", "cider", "per_qtype", "per_condition"}
    assert run(["eval", "--model", str(m), "--data", str(d), "--out", str(e), *tiny]) == 0
    assert capsys.readouterr().out == first


def test_ablate_writes_reports(tmp_path):
    out = tmp_path / "abl"
    args = ["ablate", "--preset", "tiny", "--set", "steps=3", "--set", "seeds=0", "--set", "n_train=8",
            "--set", "n_test=4", "--out", str(out)]
    assert run(args) == 0
    for name in ("report.csv", "report.json", "summary.csv", "checks.txt", "config.resolved", "mtc.log"):
        assert (out / name).exists(), name
    assert (out / "report.csv").read_text().count("\n") == 5
    assert run(args + ["--check"]) in (0, 1)


@pytest.mark.parametrize("seed", [1])
def test_gradcheck_command(tmp_path, capsys, seed):
    assert run(["gradcheck", "--seed", str(seed), "--out", str(tmp_path / "g")]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("max relative error") and float(line.split()[3]) <= 1e-3
