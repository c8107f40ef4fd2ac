import json

import pytest

from conftest import BUNDLED
from ruledenoise import cli
from ruledenoise.llm import API_KEY_ENV

DEMO = str(BUNDLED / "demo_config.json")


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture
def out(tmp_path):
    return tmp_path / "run"


@pytest.mark.parametrize("cmd", [None, *cli.COMMANDS])
def test_help_exits_zero(cmd, capsys):
    argv = ["--help"] if cmd is None else [cmd, "--help"]
    assert run(*argv) == 0
    assert "usage" in capsys.readouterr().out


def test_usage_errors(capsys):
    assert run("teleport") == 1
    assert run() == 1
    assert run("train", "--epochs", "many") == 1


def test_config_errors(tmp_path, out):
    assert run("train", "--config", str(tmp_path / "missing.json")) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"datasett": "x"}))
    assert run("train", "--config", str(bad)) == 2
    assert run("train", "--output-dir", str(out)) == 2  # no dataset
    assert run("run-agent", "--config", DEMO, "--output-dir", str(out), "--backend", "smoke-signal") == 2


def test_http_without_key_is_config_error(monkeypatch, out):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    assert run("run-agent", "--config", DEMO, "--output-dir", str(out),
               "--backend", "http", "--base-url", "https://llm.example") == 2


def test_demo_pipeline(out, capsys):
    assert run("ingest", "--config", DEMO, "--output-dir", str(out)) == 0
    assert "20\t80\t280" in capsys.readouterr().out
    assert run("split", "--config", DEMO, "--output-dir", str(out)) == 0
    assert all((out / f"{n}.tsv").exists() for n in ("train", "valid", "test"))
    assert run("inject-noise", "--config", DEMO, "--output-dir", str(out)) == 0
    assert (out / "noise_ledger.json").exists()
    assert run("train", "--config", DEMO, "--output-dir", str(out), "--epochs", "5") == 0
    assert (out / "train_metrics.tsv").read_text().startswith("split\t")
    assert run("eval", "--config", DEMO, "--output-dir", str(out)) == 0
    assert len((out / "eval.tsv").read_text().splitlines()) == 3
    assert run("compile-rules", "--config", DEMO, "--output-dir", str(out), "--epochs", "5") == 0
    rep = json.loads((out / "compile_report.json").read_text())
    assert rep["flagged"] > 0 and 0.0 <= rep["noise_precision"] <= 1.0


def test_run_agent_and_followups(out, capsys):
    assert run("run-agent", "--config", DEMO, "--output-dir", str(out)) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["complete"] and 0.0 <= report["test"]["recall@20"] <= 1.0
    for name in ("config.json", "transcript.jsonl", "confidence.jsonl", "actions.jsonl", "rules.txt",
                 "params.npz", "traces.bin", "timing.json"):
        assert (out / name).exists(), name
    capsys.readouterr()
    assert run("export-rules", "--config", DEMO, "--output-dir", str(out)) == 0
    assert "PercentileThreshold" in capsys.readouterr().out
    assert (out / "exported_rules.txt").read_text().startswith("Rule-1(")
    assert run("report", "--run-dir", str(out)) == 0
    for name in ("summary.tsv", "eval_curve.png", "confidence_hist.png", "loss_traces.png"):
        assert (out / name).exists(), name


def test_run_agent_reproducible(tmp_path):
    for k in "ab":
        assert run("run-agent", "--config", DEMO, "--output-dir", str(tmp_path / k)) == 0
    for name in ("report.json", "confidence.jsonl", "actions.jsonl", "rules.txt", "rules.meta.json",
                 "transcript.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_run_agent_incomplete_exit(tmp_path, out):
    script = tmp_path / "bad_script.json"
    script.write_text(json.dumps({"planning": ["no idea", "still no idea"]}))
    assert run("run-agent", "--config", DEMO, "--output-dir", str(out), "--script", str(script)) == 2
    assert json.loads((out / "report.json").read_text())["complete"] is False


def test_compare_unlearning(out):
    assert run("compare-unlearning", "--config", DEMO, "--output-dir", str(out), "--epochs", "10",
               "--eraser-epochs", "3") == 0
    summary = json.loads((out / "unlearning.json").read_text())
    assert summary["arms"]["retrain"]["epochs"] == 10 and summary["arms"]["losseraser"]["epochs"] == 3
    assert summary["speedup"] > 0 and (out / "unlearning.png").exists()
    assert run("compare-unlearning", "--config", DEMO, "--output-dir", str(out), "--epochs", "3",
               "--eraser-epochs", "2", "--noisy-source", "ledger") == 0
    assert json.loads((out / "unlearning.json").read_text())["noise_precision"] == 1.0


def test_idempotent_outputs(out):
    for _ in range(2):
        assert run("split", "--config", DEMO, "--output-dir", str(out)) == 0
        first = (out / "train.tsv").read_bytes()
    assert run("split", "--config", DEMO, "--output-dir", str(out)) == 0
    assert (out / "train.tsv").read_bytes() == first


def test_seed_override_changes_split(tmp_path):
    run("split", "--config", DEMO, "--output-dir", str(tmp_path / "a"))
    run("split", "--config", DEMO, "--output-dir", str(tmp_path / "b"), "--split-seed", "9")
    assert (tmp_path / "a" / "test.tsv").read_bytes() != (tmp_path / "b" / "test.tsv").read_bytes()
