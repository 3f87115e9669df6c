import json
import os
import subprocess
import sys

import pytest

from storyalign import __version__
from storyalign.cli import main


def _synth_args(out, seed=0, stories=6):
    return [
        "synth", "--out", str(out), "--seed", str(seed),
        "--stories", str(stories), "--images-per-story", "3",
        "--sentences-per-article", "4", "--articles-per-story", "2",
        "--dim", "12", "--latent-dim", "6",
    ]


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(_synth_args(out)) == 0
    return out


# ---------------------------------------------------------------------------
# parser behaviour

def test_unknown_subcommand_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "invalid choice" in capsys.readouterr().err


def test_missing_subcommand_exits_two():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


# ---------------------------------------------------------------------------
# synth

def test_synth_writes_corpus_and_run_manifest(synth_dir):
    names = {p.name for p in synth_dir.iterdir()}
    assert {"manifest.json", "text.emb", "image.emb", "run_manifest.json"} <= names
    run = json.loads((synth_dir / "run_manifest.json").read_text())
    assert run["command"] == "synth"
    assert run["seed"] == 0
    assert run["config"]["num_stories"] == 6
    assert sorted(run["outputs"]) == run["outputs"]


def test_synth_same_seed_byte_identical(tmp_path, synth_dir):
    other = tmp_path / "again"
    assert main(_synth_args(other)) == 0
    for name in ("manifest.json", "text.emb", "image.emb", "run_manifest.json"):
        assert (other / name).read_bytes() == (synth_dir / name).read_bytes()


def test_synth_requires_out_dir(monkeypatch, capsys):
    monkeypatch.delenv("STORYALIGN_OUT", raising=False)
    assert main(["synth", "--stories", "2"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert "--out" in err["message"]


def test_out_dir_from_environment(tmp_path, monkeypatch):
    target = tmp_path / "via_env"
    monkeypatch.setenv("STORYALIGN_OUT", str(target))
    assert main(["synth", "--stories", "2", "--images-per-story", "2",
                 "--sentences-per-article", "2", "--articles-per-story", "1",
                 "--dim", "6", "--latent-dim", "3"]) == 0
    assert (target / "manifest.json").is_file()


def test_thread_cap_lands_in_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("OMP_NUM_THREADS", "sentinel")
    monkeypatch.delenv("STORYALIGN_THREADS", raising=False)
    assert main(_synth_args(tmp_path / "t", seed=1, stories=2) + ["--threads", "2"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "2"


# ---------------------------------------------------------------------------
# ingest

def test_ingest_accepts_synth_output(synth_dir, capsys):
    assert main(["ingest", "--data", str(synth_dir)]) == 0
    assert "ok: 6 stories" in capsys.readouterr().out


def test_ingest_reports_validation_failure(tmp_path, capsys):
    out = tmp_path / "broken"
    assert main(_synth_args(out, stories=3)) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["stories"][0]["image_ids"].append("img_missing")
    (out / "manifest.json").write_text(json.dumps(manifest))
    assert main(["ingest", "--data", str(out)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["ok"] is False
    assert any(i["kind"] == "broken_image_ref" for i in err["issues"])


def test_ingest_missing_dataset_exits_one(tmp_path, capsys):
    assert main(["ingest", "--data", str(tmp_path / "absent")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["command"] == "ingest"
    assert err["error"] == "FormatError"


# ---------------------------------------------------------------------------
# pipeline: cluster -> select-sets -> train -> eval

def test_full_pipeline_smoke(tmp_path, synth_dir, capsys):
    clustered = tmp_path / "clustered"
    assert main(["cluster", "--data", str(synth_dir), "--out", str(clustered),
                 "--window-days", "3650", "--threshold", "0.2"]) == 0
    assert (clustered / "clusters.json").is_file()
    summary = json.loads((clustered / "clusters.json").read_text())
    assert len(summary) >= 1

    curated = tmp_path / "curated"
    assert main(["select-sets", "--data", str(clustered), "--out", str(curated),
                 "--k", "3", "--min-images", "3"]) == 0
    manifest = json.loads((curated / "manifest.json").read_text())
    assert all(len(s["ground_truth_set"]) == 3 for s in manifest["stories"])

    ckpt = tmp_path / "ckpt"
    assert main(["train", "--data", str(synth_dir), "--out", str(ckpt),
                 "--objective", "infonce", "--steps", "6", "--warmup", "2",
                 "--batch-size", "4", "--base-lr", "0.01", "--joint-dim", "8",
                 "--seed", "0"]) == 0
    assert (ckpt / "checkpoint.json").is_file()
    out = capsys.readouterr().out
    assert "trained infonce for 6 steps" in out

    eval_a = tmp_path / "eval_a"
    assert main(["eval", "--data", str(curated), "--ckpt", str(ckpt),
                 "--out", str(eval_a), "--protocol", "fixed3"]) == 0
    report = json.loads((eval_a / "eval_report.json").read_text())
    assert report["protocol"] == "fixed3"
    assert len(report["ranks"]) == len(manifest["stories"])
    assert "protocol=fixed3" in capsys.readouterr().out

    eval_b = tmp_path / "eval_b"
    assert main(["eval", "--data", str(curated), "--ckpt", str(ckpt),
                 "--out", str(eval_b), "--protocol", "fixed3"]) == 0
    assert (eval_a / "eval_report.json").read_bytes() == \
        (eval_b / "eval_report.json").read_bytes()


def test_cluster_entity_merge_flag(tmp_path, synth_dir):
    out = tmp_path / "merged"
    assert main(["cluster", "--data", str(synth_dir), "--out", str(out),
                 "--window-days", "3650", "--threshold", "0.2",
                 "--entity-threshold", "0.9"]) == 0
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["config"]["entity_threshold"] == 0.9


def test_train_rejects_bad_override(tmp_path, synth_dir, capsys):
    assert main(["train", "--data", str(synth_dir), "--out", str(tmp_path / "x"),
                 "--steps", "0"]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


# ---------------------------------------------------------------------------
# illustrate and gradcheck

def test_illustrate_subcommand(tmp_path, synth_dir, capsys):
    article = tmp_path / "article.json"
    article.write_text(json.dumps({
        "article_id": "demo",
        "text": "Harbor Lights festival opened in Port Alba as Mayor Idris spoke.",
        "sentence_embeddings": [[0.1] * 12, [0.2] * 12],
    }))
    out = tmp_path / "illu"
    assert main(["illustrate", "--article", str(article), "--pool", str(synth_dir),
                 "--x", "2", "--m-per-entity", "3", "--out", str(out),
                 "--attribution"]) == 0
    printed = json.loads(capsys.readouterr().out)
    saved = json.loads((out / "illustrate_report.json").read_text())
    assert printed == saved
    assert saved["article_id"] == "demo"
    assert len(saved["chosen"]) == 2
    assert len(saved["attribution"]) == 2


def test_gradcheck_subcommand(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--batches", "1", "--seed", "3",
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "tolerance 1e-04: ok" in text
    report = json.loads((out / "gradcheck_report.json").read_text())
    assert report["ok"] is True
    assert set(report["losses"]) == {"infonce", "milnce", "pcme", "milsim"}


# ---------------------------------------------------------------------------
# module execution

def test_module_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "storyalign.cli", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert __version__ in proc.stdout


def test_module_entry_point_usage_error():
    proc = subprocess.run(
        [sys.executable, "-m", "storyalign.cli", "nonsense"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "invalid choice" in proc.stderr
