"""Command-line surface: subcommands, exit codes, artifact emission."""

import json

import pytest
import yaml
from click.testing import CliRunner

from voqa.cli import main
from voqa.manifest import read_manifest, write_manifest
from voqa.synthetic import CorpusSpec, synth_corpus

FAST_FLAGS = ["--epochs", "2", "--hidden", "8,8,8", "--attn-dim", "4",
              "--batch-size", "4", "--dropout", "0.1", "--seed", "7"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clicorpus")
    spec = CorpusSpec(n_speakers=6, stack_layers=3, stack_dim=8,
                      frames_lo=5, frames_hi=10, vowel_duration=0.4,
                      sentence_piece=0.3, seed=33)
    rows = synth_corpus(spec, root)
    write_manifest(root / "manifest.csv", rows)
    return root


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinycorpus")
    spec = CorpusSpec(n_speakers=2, stack_layers=3, stack_dim=8,
                      frames_lo=5, frames_hi=8, vowel_duration=0.4,
                      sentence_piece=0.3, seed=5)
    rows = synth_corpus(spec, root)
    write_manifest(root / "manifest.csv", rows)
    return root


@pytest.fixture()
def runner():
    return CliRunner()


def test_validate_clean(runner, corpus):
    res = runner.invoke(main, ["validate", str(corpus / "manifest.csv")])
    assert res.exit_code == 0, res.output
    assert "no issues" in res.output


def test_validate_reports_issues(runner, corpus, tmp_path):
    rows = read_manifest(corpus / "manifest.csv")
    bad = [dict(r) for r in rows]
    bad[1]["utterance_id"] = bad[0]["utterance_id"]
    path = tmp_path / "dup.csv"
    write_manifest(path, bad)
    res = runner.invoke(main, ["validate", str(path),
                               "--base-dir", str(corpus)])
    assert res.exit_code == 1
    report = json.loads(res.output)
    assert any(i["code"] == "DUPLICATE_ID" for i in report["issues"])


def test_validate_missing_file_is_usage_error(runner, tmp_path):
    res = runner.invoke(main, ["validate", str(tmp_path / "absent.csv")])
    assert res.exit_code == 2


def test_lld_stdout_and_file(runner, tiny_corpus, tmp_path, monkeypatch):
    cache = tmp_path / "cache"
    monkeypatch.setenv("VOQA_CACHE_DIR", str(cache))
    res = runner.invoke(main, ["lld", str(tiny_corpus / "manifest.csv")])
    assert res.exit_code == 0, res.output
    header = res.output.splitlines()[0]
    assert header.startswith("utterance_id,subset,jitter_local,shimmer_local,hnr_db")
    assert len(res.output.strip().splitlines()) == 5  # header + 4 utterances
    assert list(cache.glob("*.npy"))  # cache honored

    out = tmp_path / "llds.csv"
    res2 = runner.invoke(main, ["lld", str(tiny_corpus / "manifest.csv"),
                                "--out", str(out)])
    assert res2.exit_code == 0
    assert out.read_text().splitlines()[0] == header


def test_augment_writes_grid(runner, tiny_corpus, tmp_path):
    out_manifest = tmp_path / "aug.csv"
    res = runner.invoke(main, ["augment", str(tiny_corpus / "manifest.csv"),
                               "--out-manifest", str(out_manifest),
                               "--seed", "1"])
    assert res.exit_code == 0, res.output
    rows = read_manifest(out_manifest)
    # per clean utterance: 16 seen + 6 unseen mixtures plus the original
    assert len(rows) == 4 * 23
    noisy = [r for r in rows if r["role"] == "train_seen"]
    assert len(noisy) == 4 * 16
    assert all((tiny_corpus / r["wav_path"]).exists() for r in rows)


def test_train_eval_roundtrip(runner, corpus, tmp_path):
    model_dir = tmp_path / "model"
    res = runner.invoke(main, [
        "train", str(corpus / "manifest.csv"), "--out-dir", str(model_dir),
        "--feature-mode", "sfm_last", *FAST_FLAGS])
    assert res.exit_code == 0, res.output
    assert (model_dir / "final.vqck").exists()

    eval_dir = tmp_path / "eval"
    res2 = runner.invoke(main, [
        "eval", str(model_dir / "final.vqck"), str(corpus / "manifest.csv"),
        "--out-dir", str(eval_dir)])
    assert res2.exit_code == 0, res2.output
    assert (eval_dir / "metrics.csv").exists()
    assert "rmse" in res2.output

    res3 = runner.invoke(main, [
        "eval", str(model_dir / "final.vqck"), str(corpus / "manifest.csv"),
        "--out-dir", str(tmp_path / "e2"), "--scale", "grbas"])
    assert res3.exit_code == 2  # 6-attribute checkpoint cannot score grbas


def test_train_bad_hidden_is_config_error(runner, corpus, tmp_path):
    res = runner.invoke(main, [
        "train", str(corpus / "manifest.csv"),
        "--out-dir", str(tmp_path / "m"), "--hidden", "512;256"])
    assert res.exit_code == 2


def test_run_and_report(runner, corpus, tmp_path):
    out = tmp_path / "bundle"
    cfg = {
        "manifest": str(corpus / "manifest.csv"),
        "out_dir": str(out),
        "scale": "capev",
        "feature_mode": "sfm_last",
        "split": "holdout",
        "subsets": ["A", "S"],
        "seed": 2,
        "train": {"epochs": 2, "hidden": [8, 8, 8], "attn_dim": 4,
                  "batch_size": 4, "dropout": 0.1},
    }
    cfg_path = tmp_path / "exp.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    res = runner.invoke(main, ["run", str(cfg_path)])
    assert res.exit_code == 0, res.output
    assert (out / "metrics.csv").exists()
    assert "rmse" in res.output

    rep = runner.invoke(main, ["report", str(out)])
    assert rep.exit_code == 0, rep.output
    assert "metrics.csv" in rep.output and "utterance" in rep.output

    empty = tmp_path / "nothing"
    empty.mkdir()
    assert runner.invoke(main, ["report", str(empty)]).exit_code == 1


def test_run_missing_stacks_is_data_error(runner, corpus, tmp_path):
    rows = [dict(r) for r in read_manifest(corpus / "manifest.csv")]
    for r in rows:
        r["vqes_path"] = None
    stripped = tmp_path / "nostacks.csv"
    write_manifest(stripped, rows)
    cfg = {
        "manifest": str(stripped),
        "base_dir": str(corpus),
        "out_dir": str(tmp_path / "b2"),
        "feature_mode": "sfm_ws",
        "train": {"epochs": 2, "hidden": [8, 8, 8], "attn_dim": 4,
                  "batch_size": 4},
    }
    cfg_path = tmp_path / "exp2.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    res = runner.invoke(main, ["run", str(cfg_path)])
    assert res.exit_code == 1
    assert "missing embedding stacks" in res.output


def test_run_unknown_key_is_config_error(runner, tmp_path):
    cfg_path = tmp_path / "exp3.yaml"
    cfg_path.write_text(yaml.safe_dump(
        {"manifest": "m.csv", "out_dir": "o", "mystery": 1}))
    res = runner.invoke(main, ["run", str(cfg_path)])
    assert res.exit_code == 2
