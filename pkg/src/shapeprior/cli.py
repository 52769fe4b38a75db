"""Command-line pipeline: synth, train, eval, xval.

Each command writes its outputs plus one ``run_manifest.json`` into its
output directory. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .anomaly import (ShapeRecord, build_report, calibrate_threshold, in_hull, lda_fit, lda_project,
                      linear_separation, write_lda_csv, write_lda_svg)
from .config import ExperimentConfig, load_config, replace
from .infer import infer_latent
from .model import load_checkpoint, save_checkpoint, write_latent_table
from .synth import load_scans, make_folds, read_manifest, write_population
from .tensor import ContractError, single_thread
from .train import train

log = logging.getLogger("shapeprior")


class UsageError(Exception):
    """Bad arguments, configuration or missing inputs (exit code 2)."""


class TrainSetError(RuntimeError):
    """A training split contains an anomalous shape."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_manifest(out_dir, command, cfg: ExperimentConfig, inputs, outputs, started) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": {str(Path(p).relative_to(out_dir)): sha256_file(p) for p in outputs},
        "tool_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _json_dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, out_dir) -> Path:
    """Write the synthetic population (VOXL1 files + manifest.csv)."""
    started = time.time()
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".synth-", dir=out_dir.parent))
    try:
        write_population(cfg.population, tmp)
        out_dir.mkdir(exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, out_dir / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    outputs = sorted(p for p in out_dir.iterdir() if p.name != "run_manifest.json")
    write_run_manifest(out_dir, "synth", cfg, [], outputs, started)
    return out_dir


def _load_split(data_dir, cfg: ExperimentConfig, fold: int):
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        raise UsageError(f"{manifest} not found")
    entries = read_manifest(manifest)
    plan = make_folds([(e.subject_id, e.group) for e in entries], cfg.eval.k, cfg.eval.fold_seed)
    if not 0 <= fold < plan.k:
        raise UsageError(f"fold {fold} outside 0..{plan.k - 1}")
    train_ids, test_ids = set(plan.train_ids(fold)), set(plan.test_ids(fold))
    train_entries = [e for e in entries if e.subject_id in train_ids]
    test_entries = [e for e in entries if e.subject_id in test_ids]
    if cfg.eval.test_scans is not None:
        test_entries = [e for e in test_entries if e.scan_index < cfg.eval.test_scans]
    return entries, train_entries, test_entries


def train_prior(data_dir, train_entries, cfg: ExperimentConfig):
    """Train on the given manifest rows; refuses any anomalous shape."""
    bad = [e.key for e in train_entries if e.group.is_anomalous]
    grids = load_scans(data_dir, train_entries)
    bad += [e.key for e, g in zip(train_entries, grids) if g.group.is_anomalous and e.key not in bad]
    if bad:
        raise TrainSetError(f"anomalous shapes in training split: {bad}")
    if not grids:
        raise UsageError("training split is empty")
    return train(grids, cfg.train, keys=[e.key for e in train_entries])


def cmd_train(data_dir, fold: int, cfg: ExperimentConfig, out_dir) -> Path:
    """Train the prior on a fold's normal training subjects; returns the checkpoint path."""
    started = time.time()
    _, train_entries, _ = _load_split(data_dir, cfg, fold)
    prior = train_prior(data_dir, train_entries, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.inrc"
    save_checkpoint(ckpt, prior.model, prior.latents, ce_weight=cfg.train.ce_weight, lam=cfg.train.lam,
                    extra={"fold": fold, "k": cfg.eval.k, "guard_ok": prior.guard_ok,
                           "train_keys": [e.key for e in train_entries]})
    prior.write_loss_csv(out_dir / "loss.csv")
    outputs = [ckpt, ckpt.with_name(ckpt.name + ".latents.csv"), out_dir / "loss.csv"]
    write_run_manifest(out_dir, "train", cfg, [Path(data_dir) / "manifest.csv"], outputs, started)
    return ckpt


def _box(values) -> dict:
    if not values:
        return {}
    q = np.percentile(np.asarray(values, dtype=np.float64), [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


def cmd_eval(checkpoint, data_dir, fold: int, cfg: ExperimentConfig, out_dir) -> dict:
    """Infer every test shape, score, calibrate, project latents; returns the report dict."""
    started = time.time()
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise UsageError(f"checkpoint {checkpoint} not found")
    before = sha256_file(checkpoint)
    try:
        model, header, train_latents = load_checkpoint(checkpoint)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid checkpoint {checkpoint}: {exc}") from exc
    entries, _, test_entries = _load_split(data_dir, cfg, fold)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    grids = load_scans(data_dir, test_entries)
    records, test_z = [], {}
    for e, g in zip(test_entries, grids):
        res = infer_latent(model, g, cfg.infer)
        test_z[e.key] = res.z
        records.append(ShapeRecord(e.subject_id, e.group.name, res.dice_vs_input, res.vol_err.err_cm3,
                                   res.vol_err.err_pct, "", res.final_loss, e.key))
        log.info("%s %s dice=%.4f", e.key, e.group.name, res.dice_vs_input)
    after = sha256_file(checkpoint)

    normal_scores = [r.dice for r in records if r.group == "synthetic_normal" or r.group in ("young", "old_nonsarcopenic")]
    if len(normal_scores) < 2:
        raise UsageError("need at least 2 held-out normal shapes to calibrate the threshold")
    tau = calibrate_threshold(normal_scores, cfg.eval.quantile)
    report = build_report(records, tau, cfg.eval.quantile)
    report.stats["checkpoint_sha256_before"] = before
    report.stats["checkpoint_sha256_after"] = after
    report.stats["checkpoint_unchanged"] = before == after
    report.stats["lda"] = _lda_section(entries, train_latents, test_z, records, out_dir)

    report.write_json(out_dir / "report.json")
    report.write_csv(out_dir / "report.csv")
    _write_scores(out_dir / "scores.csv", records)
    write_latent_table(out_dir / "test_latents.csv", test_z)
    outputs = [out_dir / n for n in ("report.json", "report.csv", "scores.csv", "test_latents.csv", "lda.csv")]
    if (out_dir / "lda.svg").exists():
        outputs.append(out_dir / "lda.svg")
    write_run_manifest(out_dir, "eval", cfg, [checkpoint, Path(data_dir) / "manifest.csv"],
                       [p for p in outputs if p.exists()], started)
    return json.loads((out_dir / "report.json").read_text())


def _write_scores(path, records):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "group", "dice", "vol_err_cm3", "vol_err_pct", "final_loss"])
        for r in records:
            w.writerow([r.subject_id, r.group, repr(float(r.dice)), repr(float(r.vol_err_cm3)),
                        repr(float(r.vol_err_pct)), repr(float(r.final_loss))])


def _lda_section(entries, train_latents, test_z, records, out_dir) -> dict:
    """Fit LDA on training latents labelled by normal cohort, project everything."""
    by_key = {e.key: e for e in entries}
    train_keys = [k for k in train_latents if k in by_key]
    labels = [by_key[k].cohort for k in train_keys]
    if len(set(labels)) < 2 or min(labels.count(c) for c in set(labels)) < 2:
        log.warning("LDA skipped: training latents need >= 2 cohorts with >= 2 shapes each")
        return {"fitted": False}
    zs = np.stack([train_latents[k] for k in train_keys]).astype(np.float64)
    proj = lda_fit(zs, labels)
    rows = [(k, f"{by_key[k].group.name}|train|cohort{c}", u, v) for k, c, (u, v) in zip(train_keys, labels, proj.points)]
    test_pts = {}
    for r in records:
        u, v = lda_project(proj, test_z[r.key])
        test_pts[r.key] = (u, v)
        rows.append((r.key, f"{r.group}|test|cohort{by_key[r.key].cohort}", u, v))
    write_lda_csv(out_dir / "lda.csv", rows)
    try:
        write_lda_svg(out_dir / "lda.svg", [(k, g.rsplit("|cohort", 1)[0], u, v) for k, g, u, v in rows])
    except Exception as exc:  # plot is best effort
        log.warning("SVG plot skipped: %s", exc)

    section = {"fitted": True, "classes": [int(c) for c in proj.classes], "second_axis": proj.second_axis,
               "eigenvalues": [float(x) for x in proj.eigenvalues[:2]], "centering": proj.centering}
    anom = np.array([test_pts[r.key] for r in records if r.group in ("synthetic_anomalous", "sarcopenic")])
    if len(anom):
        section["anomalous_vs_train_balanced_accuracy"] = linear_separation(proj.points, anom)["balanced_accuracy"]
    inside = []
    for r in records:
        if r.group in ("synthetic_anomalous", "sarcopenic"):
            continue
        cluster = proj.points[np.asarray(labels) == by_key[r.key].cohort]
        try:
            inside.append(bool(in_hull([test_pts[r.key]], cluster)[0]))
        except Exception:  # degenerate hull (too few or collinear points)
            inside.append(False)
    if inside:
        section["normal_test_in_train_hull_fraction"] = float(np.mean(inside))
    return section


def cmd_xval(data_dir, k: int, cfg: ExperimentConfig, out_dir) -> dict:
    """Train and evaluate every fold; writes per-fold outputs and summary.json."""
    started = time.time()
    if k < 2:
        raise UsageError("k must be >= 2")
    cfg = replace(cfg, eval={"k": k})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = {}
    outputs = []
    for fold in range(k):
        fdir = out_dir / f"fold{fold}"
        ckpt = cmd_train(data_dir, fold, cfg, fdir / "train")
        rep = cmd_eval(ckpt, data_dir, fold, cfg, fdir / "eval")
        recs = rep["records"]
        anom = {"synthetic_anomalous", "sarcopenic"}
        folds[f"fold{fold}"] = {
            "dice": {"test_normal": _box([r["dice"] for r in recs if r["group"] not in anom]),
                     "test_anomalous": _box([r["dice"] for r in recs if r["group"] in anom])},
            "vol_err_pct": {"test_normal": _box([r["vol_err_pct"] for r in recs if r["group"] not in anom]),
                            "test_anomalous": _box([r["vol_err_pct"] for r in recs if r["group"] in anom])},
            "auc": rep["stats"]["auc"],
            "threshold": rep["threshold"],
            "anomalous_subjects": sorted({r["subject_id"] for r in recs if r["group"] in anom}),
        }
        outputs += [ckpt, fdir / "eval" / "report.json"]
    aucs = [f["auc"] for f in folds.values() if f["auc"] is not None]
    summary = {"k": k, "folds": folds, "mean_auc": float(np.mean(aucs)) if aucs else None}
    _json_dump(out_dir / "summary.json", summary)
    write_run_manifest(out_dir, "xval", cfg, [Path(data_dir) / "manifest.csv"], [out_dir / "summary.json"] + outputs,
                       started)
    return summary


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style experiment config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--single-thread", action="store_true", help="limit BLAS to one thread (bit-reproducible)")
    common.add_argument("--grid", type=int, help="cubic grid size D (D x D x D)")
    common.add_argument("--epochs", type=int, help="training epochs")
    common.add_argument("--infer-epochs", type=int, help="latent inference epochs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="shapeprior", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic population")
    t = sub.add_parser("train", parents=[common], help="train the prior on one fold")
    t.add_argument("data", help="population directory (with manifest.csv)")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--k", type=int)
    e = sub.add_parser("eval", parents=[common], help="infer, score and project a fold's test set")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--k", type=int)
    x = sub.add_parser("xval", parents=[common], help="k-fold cross-validation")
    x.add_argument("data")
    x.add_argument("--k", type=int)
    return p


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ContractError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    over = {"population": {}, "train": {}, "infer": {}, "eval": {}}
    if args.grid is not None:
        over["population"]["dims"] = (args.grid,) * 3
    if args.epochs is not None:
        over["train"]["epochs"] = args.epochs
    if args.infer_epochs is not None:
        over["infer"]["epochs"] = args.infer_epochs
    if getattr(args, "k", None) is not None:
        over["eval"]["k"] = args.k
    return replace(cfg, **over)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    guard = single_thread() if args.single_thread else contextlib.nullcontext()
    try:
        with guard:
            if args.command == "synth":
                cmd_synth(cfg, args.out)
            elif args.command == "train":
                cmd_train(args.data, args.fold, cfg, args.out)
            elif args.command == "eval":
                cmd_eval(args.checkpoint, args.data, args.fold, cfg, args.out)
            elif args.command == "xval":
                cmd_xval(args.data, cfg.eval.k, cfg, args.out)
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
