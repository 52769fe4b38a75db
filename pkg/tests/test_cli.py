import csv
import json

import pytest

from shapeprior.cli import TrainSetError, main, sha256_file, train_prior
from shapeprior.synth import read_manifest

TINY = """
[population]
n_normal = 6
n_anomalous = 2
dims = (16, 16, 16)
scans_per_subject = 2

[train]
epochs = 3
hidden = 16
d = 4

[infer]
epochs = 3

[eval]
k = 3
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def test_synth_writes_population_and_manifest(tiny):
    root, _ = tiny
    rows = read_manifest(root / "data" / "manifest.csv")
    assert len(rows) == (6 + 2) * 2
    assert len(list((root / "data").glob("**/*.voxl"))) == len(rows)
    manifest = json.loads((root / "data" / "run_manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["outputs"]["manifest.csv"] == sha256_file(root / "data" / "manifest.csv")


def test_synth_is_deterministic(tiny, tmp_path):
    root, cfg = tiny
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert sha256_file(tmp_path / "again" / "manifest.csv") == sha256_file(root / "data" / "manifest.csv")


def test_synth_default_population_size(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[population]\ndims = (12, 12, 12)\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert len(read_manifest(tmp_path / "d" / "manifest.csv")) == (25 + 5) * 3


@pytest.mark.parametrize("text", ["[train]\nepochs = 0\n", "[nope]\nx = 1\n", "[train]\nbogus = 3\n",
                                  "not an ini file"])
def test_invalid_config_exits_2_without_output(tmp_path, text, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text)
    out = tmp_path / "out"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["synth"]) == 2  # --out is required
    assert main(["train", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2


def test_train_writes_checkpoint_and_loss_rows(tiny):
    root, cfg = tiny
    out = root / "train0"
    assert main(["train", str(root / "data"), "--config", str(cfg), "--fold", "0", "--out", str(out),
                 "--epochs", "4"]) == 0
    with open(out / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert (out / "checkpoint.inrc").exists() and (out / "checkpoint.inrc.latents.csv").exists()
    with open(out / "checkpoint.inrc.latents.csv") as fh:
        latents = list(csv.reader(fh))[1:]
    # 4 normal training subjects (6 normals, k=3) x 2 scans
    assert len(latents) == 8
    assert not any(r[0].startswith("A") for r in latents)


def test_train_refuses_anomalous_shapes(tiny):
    root, cfg = tiny
    from shapeprior.config import load_config

    rows = read_manifest(root / "data" / "manifest.csv")
    with pytest.raises(TrainSetError):
        train_prior(root / "data", rows, load_config(cfg))


def test_eval_missing_checkpoint_exits_2(tiny, tmp_path):
    root, cfg = tiny
    assert main(["eval", str(tmp_path / "nothing.inrc"), str(root / "data"), "--config", str(cfg),
                 "--out", str(tmp_path / "e")]) == 2


def test_eval_report(tiny):
    root, cfg = tiny
    ckpt = root / "train_e" / "checkpoint.inrc"
    assert main(["train", str(root / "data"), "--config", str(cfg), "--out", str(ckpt.parent)]) == 0
    before = sha256_file(ckpt)
    out = root / "eval_e"
    assert main(["eval", str(ckpt), str(root / "data"), "--config", str(cfg), "--out", str(out)]) == 0
    assert sha256_file(ckpt) == before
    report = json.loads((out / "report.json").read_text())
    # 2 held-out normals + 2 anomalous subjects, 2 scans each
    assert sum(report["stats"]["verdict_counts"].values()) == len(report["records"]) == 8
    assert "auc" in report["stats"] and report["stats"]["checkpoint_unchanged"]
    assert report["stats"]["lda"]["fitted"]
    for name in ("scores.csv", "report.csv", "lda.csv", "lda.svg", "test_latents.csv", "run_manifest.json"):
        assert (out / name).exists(), name


def test_xval_outputs(tiny):
    root, cfg = tiny
    out = root / "xval"
    assert main(["xval", str(root / "data"), "--config", str(cfg), "--out", str(out), "--single-thread"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert sorted(summary["folds"]) == ["fold0", "fold1", "fold2"]
    for fold in range(3):
        assert (out / f"fold{fold}" / "eval" / "report.json").exists()
        stats = summary["folds"][f"fold{fold}"]
        assert set(stats["dice"]) == {"test_normal", "test_anomalous"}
        assert stats["anomalous_subjects"] == ["A000", "A001"]
