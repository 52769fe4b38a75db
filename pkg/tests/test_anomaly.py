import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from shapeprior.anomaly import (ANOMALOUS, NORMAL, ShapeRecord, build_report, calibrate_threshold, classify,
                                in_hull, lda_fit, lda_project, linear_separation, roc_auc, write_lda_csv,
                                write_lda_svg)
from shapeprior.tensor import ContractError


def pairwise_auc(normal, anomalous):
    wins = 0.0
    for a in normal:
        for b in anomalous:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(normal) * len(anomalous))


def test_calibrate_threshold():
    assert calibrate_threshold([0.95, 0.95, 0.95], 7) == pytest.approx(0.95)
    assert calibrate_threshold([0.90, 1.00], 50) == pytest.approx(0.95)
    with pytest.raises(ContractError):
        calibrate_threshold([0.9])
    with pytest.raises(ContractError):
        calibrate_threshold([0.9, 0.8], 100)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=60), st.floats(1, 99))
def test_calibrated_threshold_flags_below_percentile_position(scores, q):
    tau = calibrate_threshold(scores, q)
    flagged = sum(classify(s, tau) == ANOMALOUS for s in scores)
    # tau sits at sorted position q/100*(n-1); only earlier entries can be below it
    assert flagged <= np.ceil(q / 100 * (len(scores) - 1) - 1e-9)


def test_classify():
    assert classify(0.99, 0.93) == NORMAL
    assert classify(0.80, 0.93) == ANOMALOUS
    assert classify(0.93, 0.93) == NORMAL
    with pytest.raises(ContractError):
        classify(1.2, 0.5)


def test_roc_auc_examples():
    assert roc_auc([0.9, 0.8], [0.3, 0.4]) == 1.0
    assert roc_auc([0.5], [0.5]) == 0.5
    with pytest.raises(ContractError):
        roc_auc([], [0.1])


def test_roc_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, m = rng.integers(1, 12, size=2)
        # coarse values so ties are common
        a = np.round(rng.uniform(size=n), 1)
        b = np.round(rng.uniform(size=m) * 0.8, 1)
        assert abs(roc_auc(a, b) - pairwise_auc(a, b)) <= 1e-12


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_roc_auc_invariant_under_increasing_transform(a, b):
    f = lambda v: np.exp(np.asarray(v)) * 3 + 1  # noqa: E731
    # rounding in f can merge nearly equal values into ties; only compare when order survives
    both = np.concatenate([a, b])
    assume(np.array_equal(np.argsort(both, kind="stable"), np.argsort(f(both), kind="stable")))
    assume(len(np.unique(both)) == len(np.unique(f(both))))
    assert roc_auc(a, b) == pytest.approx(roc_auc(f(a), f(b)), abs=1e-12)


def test_report_counts_and_json(tmp_path):
    recs = [ShapeRecord("n1", "synthetic_normal", 0.97, 0.1, 1.0, ""),
            ShapeRecord("n2", "synthetic_normal", 0.95, 0.1, 1.0, ""),
            ShapeRecord("a1", "synthetic_anomalous", 0.90, 0.2, 2.0, "")]
    rep = build_report(recs, 0.93, 5)
    assert rep.stats["auc"] == 1.0
    assert sum(rep.stats["verdict_counts"].values()) == 3
    assert [r.verdict for r in recs] == [NORMAL, NORMAL, ANOMALOUS]
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0].startswith("subject_id,group,dice")


def two_class(d=8, n=400, seed=0, sep=2.0):
    rng = np.random.default_rng(seed)
    x1 = rng.normal(size=(n, d))
    x2 = rng.normal(size=(n, d))
    x1[:, 0] += sep / 2
    x2[:, 0] -= sep / 2
    return np.vstack([x1, x2]), np.array([0] * n + [1] * n)


def angle(u, v):
    c = abs(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.arccos(min(c, 1.0)))


def test_lda_first_direction_matches_fisher_closed_form():
    x, y = two_class(d=8, n=300, seed=1)
    # anisotropic within-class noise so the Fisher direction is not just the mean gap
    a = np.diag([1.0, 3.0, 0.5, 1.0, 2.0, 1.0, 1.0, 0.7])
    a[1, 0] = 0.8
    x = x @ a
    p = lda_fit(x, y)
    m1, m2 = x[y == 0].mean(0), x[y == 1].mean(0)
    sw = sum((x[y == c] - x[y == c].mean(0)).T @ (x[y == c] - x[y == c].mean(0)) for c in (0, 1))
    w = np.linalg.solve(sw, m1 - m2)
    assert angle(p.basis[0], w) <= 1e-3


def test_lda_isotropic_direction_near_e1():
    x, y = two_class(d=8, n=20000, seed=2)
    p = lda_fit(x, y)
    assert angle(p.basis[0], np.eye(8)[0]) <= 0.03  # sampling error of the estimate
    assert p.second_axis == "residual_pca"
    np.testing.assert_allclose(np.linalg.norm(p.basis, axis=1), 1.0)
    assert abs(p.basis[0] @ p.basis[1]) < 1e-10


def test_lda_identical_means_give_zero_eigenvalues():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 5))
    x = np.vstack([x, x])  # both classes share the exact same mean
    p = lda_fit(x, [0] * 40 + [1] * 40)
    assert np.max(np.abs(p.eigenvalues)) < 1e-10


def test_lda_separated_classes_project_to_disjoint_intervals():
    x, y = two_class(d=6, n=50, seed=4, sep=12.0)
    p = lda_fit(x, y)
    u = p.points[:, 0]
    assert u[y == 0].max() < u[y == 1].min()  # class 0 oriented negative
    c0, c1 = p.points[y == 0].mean(0), p.points[y == 1].mean(0)
    assert np.linalg.norm(c0 - c1) > 1.0


def test_lda_three_classes_two_discriminants():
    rng = np.random.default_rng(5)
    x = np.vstack([rng.normal(size=(30, 4)) + off for off in ([4, 0, 0, 0], [0, 4, 0, 0], [0, 0, 0, 0])])
    p = lda_fit(x, ["a"] * 30 + ["b"] * 30 + ["c"] * 30)
    assert p.basis.shape == (2, 4) and p.second_axis == "discriminant"
    cents = [p.points[i * 30:(i + 1) * 30].mean(0) for i in range(3)]
    assert min(np.linalg.norm(cents[i] - cents[j]) for i in range(3) for j in range(i)) > 1.0


def test_lda_projection_conventions():
    x, y = two_class(d=5, n=30, seed=6)
    p = lda_fit(x, y)
    np.testing.assert_allclose(lda_project(p, np.zeros(5)), -p.grand_mean @ p.basis.T)
    z1, z2 = x[0], x[1]
    lin = lda_project(p, 2 * z1 - 3 * z2) + p.grand_mean @ p.basis.T
    ref = 2 * (lda_project(p, z1) + p.grand_mean @ p.basis.T) - 3 * (lda_project(p, z2) + p.grand_mean @ p.basis.T)
    np.testing.assert_allclose(lin, ref, atol=1e-10)
    with pytest.raises(ContractError):
        lda_project(p, np.zeros(4))


def test_lda_translation_invariant_up_to_sign():
    x, y = two_class(d=6, n=40, seed=7)
    a = lda_fit(x, y)
    b = lda_fit(x + np.linspace(-3, 5, 6), y)
    for u, v in zip(a.basis, b.basis):
        assert angle(u, v) < 1e-6


def test_lda_preconditions():
    x, y = two_class(d=4, n=5)
    with pytest.raises(ContractError):
        lda_fit(x, [0] * len(x))
    with pytest.raises(ContractError):
        lda_fit(x[:6], [0, 0, 0, 0, 0, 1])
    bad = x.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        lda_fit(bad, y)


def test_separation_and_hull_helpers(tmp_path):
    rng = np.random.default_rng(8)
    a = rng.normal(size=(40, 2))
    b = rng.normal(size=(10, 2)) + [6, 0]
    assert linear_separation(a, b)["balanced_accuracy"] == 1.0
    inside = in_hull([[0, 0], [50, 50]], a)
    assert inside.tolist() == [True, False]
    rows = [("s1", "synthetic_normal|train", 0.1, 0.2), ("s2", "synthetic_anomalous|test", 1.0, -1.0)]
    write_lda_csv(tmp_path / "l.csv", rows)
    write_lda_svg(tmp_path / "l.svg", rows)
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "subject_id,group,u,v"
    assert (tmp_path / "l.svg").read_text().startswith("<svg")
