import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from oracles import average_precision_bruteforce
from eclm.evaluation import (
    EvaluationError, LabeledPool, best_f1_threshold, build_pool, demography_features,
    export_features, fit_logistic, lr_baseline, parse_literal, pr_auc, precision_accuracy,
    precision_at_k, read_features, write_report, evaluate,
)

SCORES = [0.9, 0.8, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02]
LABELS = [1, 1, 1, 0, 0, 0, 0, 0]


def test_hand_confusion():
    r = precision_accuracy(SCORES, LABELS, 0.35)
    assert (r.precision, r.accuracy) == (1.0, 1.0)
    r = precision_accuracy(SCORES, LABELS, 0.15)
    assert (r.tp, r.fp, r.tn, r.fn) == (3, 2, 3, 0)
    assert r.precision == pytest.approx(0.6)
    assert r.accuracy == pytest.approx(0.75)


def test_no_positive_predictions():
    r = precision_accuracy(SCORES, LABELS, 2.0)
    assert r.precision == 0.0 and r.no_positive_predictions
    assert r.accuracy == pytest.approx(5 / 8)


def test_threshold_below_min_predicts_everything():
    r = precision_accuracy(SCORES, LABELS, -1.0)
    assert r.precision == pytest.approx(3 / 8)
    assert r.recall == 1.0


def test_input_errors():
    with pytest.raises(EvaluationError):
        precision_accuracy([], [], 0.5)
    with pytest.raises(EvaluationError):
        pr_auc([0.1, 0.2], [1, 1])
    with pytest.raises(EvaluationError):
        pr_auc([0.1, 0.2], [1, 2])


def test_pr_auc_perfect_and_reversed():
    assert pr_auc(SCORES, LABELS) == 1.0
    rev = pr_auc(SCORES, LABELS[::-1])
    # positives at ranks 6, 7, 8: (1/6 + 2/7 + 3/8) / 3
    assert rev == pytest.approx((1 / 6 + 2 / 7 + 3 / 8) / 3, abs=1e-15)
    assert rev == pytest.approx(average_precision_bruteforce(SCORES, LABELS[::-1]), abs=1e-15)


def test_pr_auc_ties_count_as_one_threshold():
    # all tied: one threshold, precision = prevalence
    assert pr_auc([0.5] * 4, [1, 0, 0, 1]) == pytest.approx(0.5)


@given(st.integers(2, 50), st.integers(0, 2**31))
def test_pr_auc_matches_oracle(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    assume(0 < y.sum() < n)
    s = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding creates ties
    assert abs(pr_auc(s, y) - average_precision_bruteforce(s, y)) <= 1e-12


@given(st.integers(0, 2**31))
def test_pr_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    y = np.r_[1, 0, rng.integers(0, 2, 30)]
    s = rng.normal(size=32)
    assert pr_auc(np.exp(3 * s) + 7, y) == pytest.approx(pr_auc(s, y), abs=1e-15)


def test_precision_at_k():
    assert precision_at_k(SCORES, LABELS, 3) == 1.0
    assert precision_at_k(SCORES, LABELS, 4) == 0.75


def test_best_f1_threshold():
    assert best_f1_threshold(SCORES, LABELS) == 0.4


# ---------------------------------------------------------------- pools


def test_pool_ratio_and_splits():
    seeds = [f"s{i:03d}" for i in range(100)]
    universe = seeds + [f"n{i:04d}" for i in range(900)]
    pool = build_pool(seeds, universe, np.random.default_rng(0))
    assert len(pool) == 400
    assert pool.labels.sum() == 100
    names = set(pool.split.tolist())
    assert names == {"train", "validation", "test"}
    parts = [set(pool.part(n)[0]) for n in names]
    assert sum(len(p) for p in parts) == len(pool)
    assert set().union(*parts) == set(pool.users)
    tr = pool.part("train")[1]
    assert len(tr) == pytest.approx(0.72 * 400, abs=2)
    assert (tr == 0).sum() == 3 * (tr == 1).sum()


def test_pool_deterministic_and_errors():
    seeds = ["a", "b"]
    universe = list("abcdefghij")
    p1 = build_pool(seeds, universe, np.random.default_rng(3))
    p2 = build_pool(seeds, universe, np.random.default_rng(3))
    assert p1.users == p2.users and p1.split.tolist() == p2.split.tolist()
    with pytest.raises(EvaluationError, match="need 9"):
        build_pool(["a", "b", "c"], universe[:8], np.random.default_rng(0))


# ---------------------------------------------------------------- logistic regression


def toy_pool(n_pos, n_neg):
    users = [f"p{i}" for i in range(n_pos)] + [f"n{i}" for i in range(n_neg)]
    labels = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    split = np.array(["train" if i % 2 == 0 else "test" for i in range(len(users))])
    return LabeledPool(users, labels, split)


def test_separable_toy():
    pool = toy_pool(20, 60)
    rng = np.random.default_rng(0)
    feats = {u: rng.normal(size=2) + (3 if u.startswith("p") else -3) for u in pool.users}
    scores, _ = lr_baseline(feats, pool)
    te_y = pool.part("test")[1]
    assert precision_accuracy(scores, te_y, 0.5).accuracy == 1.0


def test_constant_features_give_prior():
    pool = toy_pool(20, 60)
    feats = {u: np.array([1.0, 2.0]) for u in pool.users}
    scores, model = lr_baseline(feats, pool)
    assert np.allclose(scores, 0.25, atol=1e-3)
    assert model.history[-1] <= model.history[0]


def test_non_finite_feature_names_user():
    pool = toy_pool(4, 12)
    feats = {u: np.ones(2) for u in pool.users}
    feats["n3"] = np.array([np.nan, 1.0])
    with pytest.raises(EvaluationError, match="n3"):
        lr_baseline(feats, pool)


def test_lr_deterministic():
    pool = toy_pool(10, 30)
    rng = np.random.default_rng(1)
    feats = {u: rng.normal(size=3) for u in pool.users}
    a, _ = lr_baseline(feats, pool)
    b, _ = lr_baseline(feats, pool)
    assert a.tobytes() == b.tobytes()


def test_fit_logistic_matches_gradient_optimum():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 2))
    y = (X[:, 0] + 0.5 * rng.normal(size=200) > 0).astype(float)
    m = fit_logistic(X, y, iters=5000, lr=0.5)
    Z = (X - m.mean) / m.scale
    p = 1 / (1 + np.exp(-(Z @ m.weights + m.bias)))
    grad = Z.T @ (p - y) / len(y) + 1e-4 * m.weights
    assert np.abs(grad).max() < 1e-6


# ---------------------------------------------------------------- features and files


def test_parse_literal():
    assert parse_literal("55.5") == 55.5
    assert parse_literal("2005-01-01") == 2005.0
    assert 2005.9 < parse_literal("2005-12-04") < 2006
    assert np.isnan(parse_literal("abc"))


def test_demography_features_columns():
    f = demography_features([("u1", "age", "30"), ("u1", "area", "12"), ("u2", "age", "40")])
    assert np.array_equal(f["u1"], [30.0, 12.0])
    assert f["u2"][0] == 40.0 and np.isnan(f["u2"][1])


def test_export_features_roundtrip(tmp_path):
    pool = LabeledPool(["a", "b", "c", "d"], np.array([1, 0, 0, 0]), np.array(["train"] * 4))
    fused = {"a": np.array([0.1, 0.2]), "b": np.array([-1.0, 3.0]), "d": np.array([1 / 3, 2.5])}
    M = export_features(tmp_path / "f.tsv", fused, pool)
    lines = (tmp_path / "f.tsv").read_text().splitlines()
    assert len(lines) == 4
    assert lines[2] == "c\t0\t0.0,0.0\t1"
    users, labels, R = read_features(tmp_path / "f.tsv")
    assert users == pool.users and labels.tolist() == [1, 0, 0, 0]
    assert np.array_equal(R, M)
    assert M[:, -1].tolist() == [0, 0, 1, 0]


def test_report_file(tmp_path):
    reports = {"E-CLM": evaluate(SCORES, LABELS, 0.4), "LR": evaluate(SCORES, LABELS[::-1], 0.5)}
    write_report(tmp_path / "r.csv", reports)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "method,precision,pr_auc,accuracy,threshold"
    assert lines[1] == "E-CLM,1.000000,1.000000,1.000000,0.400000"
    assert len(lines) == 3
