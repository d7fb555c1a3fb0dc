import json
from pathlib import Path

import pandas as pd
import pytest
from click.testing import CliRunner

from crash_recon.main import cli

TRAIN_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "train.toml"


@pytest.fixture
def runner():
    return CliRunner()


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_is_reproducible(runner, tmp_path):
    for name in ("a", "b"):
        result = runner.invoke(cli, ["synth", str(tmp_path / name), "--n", "5", "--seed", "1"])
        assert result.exit_code == 0, result.output
        assert "wrote 5 cases" in result.output
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")


def test_stats_prints_the_missingness_table(runner, tmp_path):
    runner.invoke(cli, ["synth", str(tmp_path), "--n", "4", "--seed", "3"])
    result = runner.invoke(cli, ["stats", str(tmp_path), "--out", str(tmp_path / "stats.csv")])
    assert result.exit_code == 0, result.output
    assert "EDR Data" in result.output
    assert (tmp_path / "stats.csv").read_text().startswith("category,")


def test_evaluate_needs_a_checkpoint(runner, tmp_path):
    runner.invoke(cli, ["synth", str(tmp_path), "--n", "2", "--seed", "1"])
    result = runner.invoke(cli, ["evaluate", str(tmp_path)])
    assert result.exit_code == 2
    assert "--ckpt" in result.output


def test_missing_corpus_is_a_usage_error(runner, tmp_path):
    result = runner.invoke(cli, ["preprocess", str(tmp_path / "nowhere")])
    assert result.exit_code == 2
    assert "does not exist" in result.output


def test_unknown_ablation_is_rejected(runner, tmp_path):
    result = runner.invoke(cli, ["evaluate", str(tmp_path), "--baseline", "--ablate", "colour"])
    assert result.exit_code == 2


def test_invalid_configuration_exits_with_2(runner, tmp_path):
    config = tmp_path / "bad.toml"
    config.write_text("[encoder]\nd_model = 10\nheads = 4\n")
    result = runner.invoke(cli, ["--config", str(config), "synth", str(tmp_path / "c"), "--n", "1"])
    assert result.exit_code == 2
    assert "invalid configuration" in result.output


@pytest.mark.slow
def test_tiny_pipeline(runner, tmp_path):
    corpus, ckpt = tmp_path / "corpus", tmp_path / "run" / "ckpt.bin"
    steps = [
        ["synth", str(corpus), "--seed", "1"],
        ["preprocess", str(corpus)],
        ["train", str(corpus), "--out", str(ckpt)],
        ["evaluate", str(corpus), "--ckpt", str(ckpt), "--out", str(tmp_path / "eval")],
        ["evaluate", str(corpus), "--baseline", "--drop", "0.3", "--out", str(tmp_path / "eval-drop")],
        ["reconstruct", str(corpus), "--ckpt", str(ckpt), "--out", str(tmp_path / "recs")],
        ["render-svg", str(corpus / "synth-0000.json"), "--baseline", "--out", str(tmp_path / "sketch.svg")],
    ]
    for args in steps:
        result = runner.invoke(cli, ["--preset", "tiny", *args])
        assert result.exit_code == 0, (args, result.output)
    assert ckpt.exists()
    assert (tmp_path / "eval" / "metrics.csv").exists()
    assert len(list((tmp_path / "recs").glob("*.csv"))) == 8
    assert (tmp_path / "sketch.svg").read_bytes().lstrip().startswith(b"<?xml")


@pytest.fixture(scope="module")
def trained_corpus(tmp_path_factory):
    """The shipped 200-case corpus trained with configs/train.toml"""
    root = tmp_path_factory.mktemp("full")
    corpus, ckpt = root / "corpus", root / "run" / "ckpt.bin"
    runner = CliRunner()
    for args in (["synth", str(corpus)], ["preprocess", str(corpus)], ["train", str(corpus), "--out", str(ckpt)]):
        result = runner.invoke(cli, ["--config", str(TRAIN_CONFIG), *args])
        assert result.exit_code == 0, (args, result.output)
    return root, corpus, ckpt


@pytest.mark.slow
def test_stage_one_halves_the_trajectory_loss(trained_corpus):
    root, _, _ = trained_corpus
    records = [json.loads(line) for line in (root / "run" / "train_log.jsonl").read_text().splitlines()]
    first = next(r for r in records if r["kind"] == "step" and r["stage"] == 1 and not r["skipped"])
    last_epoch = [r for r in records if r["kind"] == "epoch" and r["stage"] == 1][-1]
    assert last_epoch["epoch"] == 19
    assert last_epoch["mean_traj"] < 0.5 * first["traj"]


@pytest.mark.slow
def test_model_beats_the_baseline_on_held_out_cases(runner, trained_corpus):
    root, corpus, ckpt = trained_corpus
    for name, extra in (("model", ["--ckpt", str(ckpt)]), ("baseline", ["--baseline"])):
        result = runner.invoke(cli, ["--config", str(TRAIN_CONFIG), "evaluate", str(corpus), *extra,
                                     "--out", str(root / name)])
        assert result.exit_code == 0, result.output
    model = pd.read_csv(root / "model" / "metrics.csv").iloc[0]
    baseline = pd.read_csv(root / "baseline" / "metrics.csv").iloc[0]
    assert model["akd"] < baseline["akd"]
    assert model["cr"] >= baseline["cr"]


@pytest.mark.slow
def test_missing_entries_degrade_the_model_gradually(runner, trained_corpus):
    root, corpus, ckpt = trained_corpus
    result = runner.invoke(cli, ["--config", str(TRAIN_CONFIG), "sweep", str(corpus), "--ckpt", str(ckpt),
                                 "--mode", "drop", "--rates", "0,0.05,0.1,0.2,0.3,0.5", "--out", str(root / "sweep")])
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(root / "sweep" / "sweep_drop.csv")
    assert list(frame["rate"]) == [0.0, 0.05, 0.1, 0.2, 0.3, 0.5]
    band = 0.05
    for before, after in zip(frame.iloc[:-1].itertuples(), frame.iloc[1:].itertuples()):
        assert after.akd >= before.akd * (1.0 - band)
        assert after.akd_variance >= before.akd_variance * (1.0 - band)
        assert after.csa <= before.csa + 100.0 * band
