import json
import shutil
import sys

import pytest
from loguru import logger
from typer.testing import CliRunner

import cli
from backend import MockBackend
from cli import app
from corpus import load_corpus
from prompting import document_probe_text, render_date_probe, render_language_probe

runner = CliRunner()


@pytest.fixture(autouse=True)
def restore_logging():
    yield
    logger.remove()
    logger.add(sys.stderr)


@pytest.fixture
def workspace(tmp_path, data_dir):
    for path in data_dir.iterdir():
        shutil.copy(path, tmp_path / path.name)
    return tmp_path


def invoke(workspace, *args, out="out"):
    return runner.invoke(app, ["--config", str(workspace / "settings.ini"), "--out", str(workspace / out), *args])


def test_stats_writes_table(workspace):
    result = invoke(workspace, "stats")
    assert result.exit_code == 0, result.output
    lines = (workspace / "out" / "corpus_stats.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "period,language,documents,tokens,ne_percent"
    assert "Total,de,2,11,27.3" in lines


def test_run_then_eval_matches_expected_metrics(workspace, data_dir):
    assert invoke(workspace, "run").exit_code == 0
    result = invoke(workspace, "eval")
    assert result.exit_code == 0, result.output
    produced = (workspace / "out" / "metrics.csv").read_bytes()
    assert produced == (data_dir / "expected_metrics.csv").read_bytes()
    metadata = json.loads((workspace / "out" / "metrics.json").read_text(encoding="utf-8"))["metadata"]
    assert metadata["thresholds"] == [0.0, 0.4]
    assert metadata["fp_counting"] == "per_item"


def test_runs_are_deterministic(workspace):
    assert invoke(workspace, "run", out="first").exit_code == 0
    assert invoke(workspace, "run", out="second").exit_code == 0
    for name in ("cache.jsonl", "predictions.jsonl"):
        assert (workspace / "first" / name).read_bytes() == (workspace / "second" / name).read_bytes()
    assert len((workspace / "first" / "cache.jsonl").read_text(encoding="utf-8").splitlines()) == 12


def test_rerun_is_served_from_cache(workspace):
    assert invoke(workspace, "run").exit_code == 0
    before = (workspace / "out" / "predictions.jsonl").read_bytes()
    (workspace / "mock_script.json").write_text("{}", encoding="utf-8")
    assert invoke(workspace, "run").exit_code == 0
    assert (workspace / "out" / "predictions.jsonl").read_bytes() == before


def test_report_bundle(workspace):
    assert invoke(workspace, "run").exit_code == 0
    assert invoke(workspace, "eval").exit_code == 0
    result = invoke(workspace, "report")
    assert result.exit_code == 0, result.output
    report = workspace / "out" / "report"
    assert sorted(path.name for path in report.glob("*.svg")) == [
        "f1_by_entity.svg", "f1_by_period.svg", "f1_by_threshold.svg",
        "precision_by_entity.svg", "precision_by_period.svg", "precision_by_threshold.svg",
        "recall_by_entity.svg", "recall_by_period.svg", "recall_by_threshold.svg",
    ]
    assert (report / "metrics.csv").read_bytes() == (workspace / "out" / "metrics.csv").read_bytes()


def test_unreachable_backend_fails_with_summary(workspace):
    result = invoke(workspace, "--backend-url", "http://127.0.0.1:9/generate", "run")
    assert result.exit_code == 1
    assert '"status": "failed"' in result.output
    assert '"request_id"' in result.output


def test_missing_script_entry_fails_but_keeps_partial_store(workspace):
    script = json.loads((workspace / "mock_script.json").read_text(encoding="utf-8"))
    script.pop(next(iter(script)))
    (workspace / "mock_script.json").write_text(json.dumps(script), encoding="utf-8")
    result = invoke(workspace, "run")
    assert result.exit_code == 1
    lines = (workspace / "out" / "predictions.jsonl").read_text(encoding="utf-8").splitlines()
    assert json.loads(lines[-1])["stage"] == "error"


def test_missing_config_keys_exit_with_usage_error(tmp_path):
    settings = tmp_path / "settings.ini"
    settings.write_text("[settings]\nthreshold = 0.4\n", encoding="utf-8")
    result = runner.invoke(app, ["--config", str(settings), "stats"])
    assert result.exit_code == 2
    assert "corpus_<language>_train" in result.output


def test_missing_config_file(tmp_path):
    result = runner.invoke(app, ["--config", str(tmp_path / "absent.ini"), "run"])
    assert result.exit_code == 2


def test_invalid_threshold_is_rejected(workspace):
    result = invoke(workspace, "--thresholds", "0.2,1.5", "eval")
    assert result.exit_code == 2


def test_unknown_flag_fails_fast(workspace):
    result = invoke(workspace, "--no-such-flag", "run")
    assert result.exit_code != 0


def test_help_lists_flags():
    result = runner.invoke(app, ["--help"])
    assert result.exit_code == 0
    for flag in ("--config", "--backend-url", "--mock-script", "--threshold", "--thresholds", "--parallelism", "--seed", "--out"):
        assert flag in result.output


def test_probe_date_and_language(workspace, data_dir):
    script = json.loads((workspace / "mock_script.json").read_text(encoding="utf-8"))
    corpus = load_corpus({
        ("en", "dev"): workspace / "hipe_en_dev.tsv",
        ("de", "train"): workspace / "hipe_de_train.tsv",
        ("de", "dev"): workspace / "hipe_de_dev.tsv",
        ("fr", "dev"): workspace / "hipe_fr_dev.tsv",
    })
    for document in corpus:
        script[render_date_probe(document_probe_text(document)).text] = str(document.year + 10)

    sentences = ["Good morning .", "Guten Morgen .", "Bonjour ."]
    for text, answer in zip(sentences, ("English", "German", "Latin")):
        script[render_language_probe(text).text] = answer
    (workspace / "x.txt").write_text("\n".join(sentences) + "\n", encoding="utf-8")
    (workspace / "y.txt").write_text("eng\ndeu\nfra\n", encoding="utf-8")
    (workspace / "mock_script.json").write_text(json.dumps(script), encoding="utf-8")
    with open(workspace / "settings.ini", "a", encoding="utf-8") as handle:
        handle.write("wili_sentences = x.txt\nwili_labels = y.txt\nwili_per_language = 1\n")

    result = invoke(workspace, "probe-date")
    assert result.exit_code == 0, result.output
    assert (workspace / "out" / "probe_date.csv").read_text(encoding="utf-8").splitlines()[1:] == [
        "en,1,0,10.00,10.00",
        "de,2,0,10.00,10.00",
        "fr,1,0,10.00,10.00",
    ]

    result = invoke(workspace, "probe-lang")
    assert result.exit_code == 0, result.output
    assert (workspace / "out" / "probe_language.csv").read_text(encoding="utf-8") == (
        "language,n,accuracy\nen,1,1.000\nde,1,1.000\nfr,1,0.000\n"
    )


def test_missing_wili_file_is_a_usage_error(workspace):
    (workspace / "y.txt").write_text("eng\n", encoding="utf-8")
    with open(workspace / "settings.ini", "a", encoding="utf-8") as handle:
        handle.write("wili_sentences = absent.txt\nwili_labels = y.txt\n")
    result = invoke(workspace, "probe-lang")
    assert result.exit_code == 2
    assert '"status": "usage"' in result.output
    assert "absent.txt" in result.output


def test_unreadable_wili_file_fails_with_summary(workspace):
    (workspace / "x.txt").write_bytes(b"\xff\xfe caf\xe9\n")
    (workspace / "y.txt").write_text("fra\n", encoding="utf-8")
    with open(workspace / "settings.ini", "a", encoding="utf-8") as handle:
        handle.write("wili_sentences = x.txt\nwili_labels = y.txt\nwili_per_language = 1\n")
    result = invoke(workspace, "probe-lang")
    assert result.exit_code == 1
    assert '"status": "failed"' in result.output


def test_interrupted_run_exits_130_and_keeps_cache(workspace, monkeypatch):
    script = json.loads((workspace / "mock_script.json").read_text(encoding="utf-8"))
    interrupt_on = list(script)[-1]

    class InterruptingMock(MockBackend):
        def generate(self, request):
            if request.prompt == interrupt_on:
                raise KeyboardInterrupt
            return super().generate(request)

    monkeypatch.setattr(cli, "build_backend", lambda config: InterruptingMock(script))
    result = invoke(workspace, "--parallelism", "1", "run")
    assert result.exit_code == 130
    assert '"status": "interrupted"' in result.output
    cached = (workspace / "out" / "cache.jsonl").read_text(encoding="utf-8").splitlines()
    assert 10 <= len(cached) < 12
    assert not (workspace / "out" / "predictions.jsonl").exists()
