"""Reconstruction-Dice anomaly scoring and LDA projection of latent codes."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial import Delaunay

from .tensor import ContractError

NORMAL, ANOMALOUS = "normal", "anomalous"


def calibrate_threshold(normal_scores, quantile: float = 5.0) -> float:
    """Threshold at the ``quantile``-th percentile (linear interpolation)
    of held-out normal Dice scores."""
    scores = np.asarray(list(normal_scores), dtype=np.float64)
    if scores.size < 2:
        raise ContractError("need at least 2 normal scores to calibrate a threshold")
    if not 0 < quantile < 100:
        raise ContractError("quantile must lie in (0, 100)")
    return float(np.percentile(scores, quantile, method="linear"))


def classify(dice: float, tau: float) -> str:
    if not 0 <= dice <= 1:
        raise ContractError(f"dice {dice} outside [0, 1]")
    return ANOMALOUS if dice < tau else NORMAL


def roc_auc(normal_scores, anomalous_scores) -> float:
    """P(normal score > anomalous score), ties counted one half.

    Computed from midranks of the pooled sample (Mann-Whitney U).
    """
    a = np.asarray(list(normal_scores), dtype=np.float64)
    b = np.asarray(list(anomalous_scores), dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("roc_auc needs non-empty normal and anomalous score lists")
    from scipy.stats import rankdata

    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


# -- report ---------------------------------------------------------------------

@dataclass
class ShapeRecord:
    subject_id: str
    group: str
    dice: float
    vol_err_cm3: float
    vol_err_pct: float
    verdict: str
    final_loss: float = math.nan
    key: str = ""


@dataclass
class AnomalyReport:
    records: list
    threshold: float
    quantile: float
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "quantile": self.quantile,
                "stats": self.stats, "records": [asdict(r) for r in self.records]}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        names = list(ShapeRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for r in self.records:
                w.writerow([_fmt(getattr(r, n)) for n in names])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def build_report(records: list[ShapeRecord], tau: float, quantile: float) -> AnomalyReport:
    """Assign verdicts against ``tau`` and summarize separation."""
    for r in records:
        r.verdict = classify(min(max(r.dice, 0.0), 1.0), tau)
    normal = [r.dice for r in records if r.group not in ("sarcopenic", "synthetic_anomalous")]
    anom = [r.dice for r in records if r.group in ("sarcopenic", "synthetic_anomalous")]
    stats = {
        "n_test_normal": len(normal),
        "n_test_anomalous": len(anom),
        "mean_dice_test_normal": float(np.mean(normal)) if normal else math.nan,
        "mean_dice_test_anomalous": float(np.mean(anom)) if anom else math.nan,
        "auc": roc_auc(normal, anom) if normal and anom else math.nan,
        "verdict_counts": {v: sum(r.verdict == v for r in records) for v in (NORMAL, ANOMALOUS)},
    }
    return AnomalyReport(records, tau, quantile, stats)


# -- LDA ------------------------------------------------------------------------

@dataclass
class LdaProjection:
    classes: list
    class_means: np.ndarray  # (C, d)
    grand_mean: np.ndarray  # (d,); projections are taken after subtracting it
    within_scatter: np.ndarray  # (d, d), unregularized
    between_scatter: np.ndarray
    shrinkage: float
    eigenvalues: np.ndarray  # discriminant eigenvalues, descending
    basis: np.ndarray  # (k, d), unit rows, k <= 2
    second_axis: str  # "discriminant" or "residual_pca"
    points: np.ndarray | None = None  # projected fit data, (n, k)

    centering = "grand_mean"


def _scatter(x, labels, classes):
    d = x.shape[1]
    grand = x.mean(axis=0)
    means = np.stack([x[labels == c].mean(axis=0) for c in classes])
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for c, m in zip(classes, means):
        xc = x[labels == c] - m
        sw += xc.T @ xc
        diff = (m - grand)[:, None]
        sb += np.count_nonzero(labels == c) * (diff @ diff.T)
    return grand, means, sw, sb


def lda_fit(latents, labels) -> LdaProjection:
    """Fisher LDA on latent codes, up to two projection axes.

    Solves ``S_b w = mu (S_w + g I) w`` with ``g = 1e-6 * trace(S_w) / d``.
    With two classes there is a single discriminant direction; the second
    axis is then the leading principal component of the data after removing
    the component along the first axis.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ContractError("latents must be an (n, d) array with d >= 2")
    if not np.all(np.isfinite(x)):
        raise ValueError("latents contain non-finite values")
    labels = np.asarray(list(labels))
    if labels.shape[0] != x.shape[0]:
        raise ContractError("one label per latent required")
    classes = sorted(set(labels.tolist()), key=str)
    if len(classes) < 2:
        raise ContractError("LDA needs at least 2 classes")
    for c in classes:
        if np.count_nonzero(labels == c) < 2:
            raise ContractError(f"class {c!r} has fewer than 2 samples")
    d = x.shape[1]
    grand, means, sw, sb = _scatter(x, labels, classes)
    gamma = 1e-6 * np.trace(sw) / d
    if gamma <= 0:
        gamma = 1e-12
    evals, evecs = linalg.eigh(sb, sw + gamma * np.eye(d))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    n_disc = min(2, len(classes) - 1)
    basis = [v / np.linalg.norm(v) for v in evecs[:, :n_disc].T]

    # first class centroid projects negative on the first axis
    if (means[0] - grand) @ basis[0] > 0:
        basis[0] = -basis[0]
    second = "discriminant"
    if n_disc == 1:
        w = basis[0]
        resid = (x - grand) - np.outer((x - grand) @ w, w)
        _, _, vt = np.linalg.svd(resid, full_matrices=False)
        v = vt[0] - (vt[0] @ w) * w
        basis.append(v / np.linalg.norm(v))
        second = "residual_pca"
    if n_disc == 2 and (means[0] - grand) @ basis[1] > 0:
        basis[1] = -basis[1]
    if second == "residual_pca":
        b = basis[1]
        if b[np.argmax(np.abs(b))] < 0:
            basis[1] = -b
    basis = np.stack(basis)
    proj = LdaProjection(classes, means, grand, sw, sb, gamma, evals, basis, second)
    proj.points = lda_project(proj, x)
    return proj


def lda_project(p: LdaProjection, z) -> np.ndarray:
    """Coordinates of ``z`` (one code or a stack) on the projection axes."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != p.grand_mean.shape[0]:
        raise ContractError(f"latent dimension {z.shape[-1]} != {p.grand_mean.shape[0]}")
    return (z - p.grand_mean) @ p.basis.T


# -- separation checks -------------------------------------------------------------

def linear_separation(a_points, b_points) -> dict:
    """Balanced accuracy of the best threshold on the two-class Fisher
    direction between two point clouds (a = negative class)."""
    a = np.asarray(a_points, dtype=np.float64)
    b = np.asarray(b_points, dtype=np.float64)
    sw = np.cov(a.T, bias=True) * len(a) + np.cov(b.T, bias=True) * len(b)
    sw = np.atleast_2d(sw)
    sw += 1e-9 * max(np.trace(sw), 1e-12) * np.eye(sw.shape[0])
    w = np.linalg.solve(sw, b.mean(axis=0) - a.mean(axis=0))
    w /= np.linalg.norm(w)
    pa, pb = a @ w, b @ w
    cuts = np.unique(np.concatenate([pa, pb]))
    cands = np.concatenate([[cuts[0] - 1], (cuts[:-1] + cuts[1:]) / 2, [cuts[-1] + 1]])
    best = (0.0, cands[0])
    for c in cands:
        bacc = 0.5 * (np.mean(pa <= c) + np.mean(pb > c))
        if bacc > best[0]:
            best = (float(bacc), float(c))
    return {"balanced_accuracy": best[0], "threshold": best[1], "direction": w.tolist()}


def in_hull(points, hull_points) -> np.ndarray:
    """Boolean mask: which ``points`` lie inside the convex hull of ``hull_points``."""
    hull = Delaunay(np.asarray(hull_points, dtype=np.float64))
    return hull.find_simplex(np.asarray(points, dtype=np.float64)) >= 0


def write_lda_csv(path, rows) -> None:
    """rows: iterable of (subject_id, group, u, v)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "group", "u", "v"])
        for sid, group, u, v in rows:
            w.writerow([sid, group, repr(float(u)), repr(float(v))])


_COLORS = {"synthetic_normal": "#1f77b4", "young": "#1f77b4", "old_nonsarcopenic": "#e3b505",
           "sarcopenic": "#d62728", "synthetic_anomalous": "#d62728"}


def write_lda_svg(path, rows, size=480) -> None:
    """Minimal standalone scatter plot; rows as for :func:`write_lda_csv`.
    A trailing ``|train``/``|test`` on the group picks filled/hollow markers."""
    rows = list(rows)
    if not rows:
        return
    uv = np.array([[r[2], r[3]] for r in rows], dtype=np.float64)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for (sid, group, u, v), (pu, pv) in zip(rows, uv):
        x = pad + (pu - lo[0]) / span[0] * (size - 2 * pad)
        y = size - pad - (pv - lo[1]) / span[1] * (size - 2 * pad)
        base, _, split = str(group).partition("|")
        color = _COLORS.get(base, "#2ca02c")
        fill = color if split != "test" else "none"
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{fill}" stroke="{color}">'
                     f'<title>{sid} {group}</title></circle>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
