"""
The command-line pipeline
=========================

``shapeprior synth | train | eval | xval`` drive the same library from an
INI config. This script runs a tiny cross-validation through the Python
entry point; the shell equivalent is shown next to each call.
"""
import json
import tempfile
from pathlib import Path

from shapeprior.cli import main

config = Path(__file__).resolve().parent.parent / "configs" / "tiny.ini"
work = Path(tempfile.mkdtemp(prefix="shapeprior-demo-"))

# shapeprior synth --config configs/tiny.ini --out WORK/data
assert main(["synth", "--config", str(config), "--out", str(work / "data")]) == 0
print("population:", (work / "data" / "manifest.csv").read_text().splitlines()[:3], "...")

# tiny.ini trains for only 3 epochs (it exists for fast determinism checks);
# flags override the config, so ask for enough epochs to learn something.
# With four training subjects per fold the per-fold AUC is still noisy.
# shapeprior xval WORK/data --config configs/tiny.ini --epochs 150 --infer-epochs 150 --single-thread --out WORK/xval
assert main(["xval", str(work / "data"), "--config", str(config), "--epochs", "150", "--infer-epochs", "150",
             "--single-thread", "--out", str(work / "xval")]) == 0
summary = json.loads((work / "xval" / "summary.json").read_text())
for name, fold in summary["folds"].items():
    print(name, "AUC", fold["auc"], "median DSC", {g: round(b["median"], 3) for g, b in fold["dice"].items() if b})

# every command leaves a run manifest with the resolved config and output hashes
manifest = json.loads((work / "xval" / "run_manifest.json").read_text())
print("manifest outputs:", len(manifest["outputs"]), "files; seed", manifest["seed"])
print("outputs in", work)
