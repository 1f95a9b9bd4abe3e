"""Metrics, labelled pools, the logistic-regression baseline and feature export."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
DEFAULT_FRACTIONS = (0.72, 0.10, 0.18)
NEG_RATIO = 3


class EvaluationError(ValueError):
    pass


# ----------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    precision: float
    accuracy: float
    pr_auc: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    no_positive_predictions: bool = False

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.ndim != 1:
        raise EvaluationError("scores and labels must be 1-d and of equal length")
    if len(s) == 0:
        raise EvaluationError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise EvaluationError("labels must be binary")
    return s, y


def confusion(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    tn = int((~pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    return tp, fp, tn, fn


def precision_accuracy(scores, labels, threshold: float) -> MetricReport:
    """Threshold metrics; precision is 0 (and flagged) with no positive predictions."""
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    flag = tp + fp == 0
    precision = 0.0 if flag else tp / (tp + fp)
    accuracy = (tp + tn) / (tp + fp + tn + fn)
    return MetricReport(precision, accuracy, float("nan"), threshold, tp, fp, tn, fn, flag)


def pr_auc(scores, labels) -> float:
    """Average precision: sum over distinct descending thresholds of dR * P."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise EvaluationError("pr_auc needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float((d_recall * precision).sum())


def precision_at_k(scores, labels, k: int) -> float:
    s, y = _check(scores, labels)
    k = min(int(k), len(s))
    if k < 1:
        raise EvaluationError("k must be >= 1")
    order = np.argsort(-s, kind="stable")[:k]
    return float(y[order].mean())


def best_f1_threshold(scores, labels) -> float:
    """Threshold among the observed scores maximising F1 (highest on ties)."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    tp = np.cumsum(yy)
    last = np.r_[np.nonzero(np.diff(ss))[0], len(ss) - 1]
    tp = tp[last]
    predicted = last + 1
    f1 = np.where(n_pos + predicted > 0, 2 * tp / (n_pos + predicted), 0.0)
    return float(ss[last[int(np.argmax(f1))]])


def evaluate(test_scores, test_labels, threshold: float) -> MetricReport:
    rep = precision_accuracy(test_scores, test_labels, threshold)
    rep.pr_auc = pr_auc(test_scores, test_labels)
    return rep


# ----------------------------------------------------------------------
# labelled pools


@dataclass
class LabeledPool:
    users: list[str]
    labels: np.ndarray
    split: np.ndarray  # split names

    def part(self, name: str) -> tuple[list[str], np.ndarray]:
        m = self.split == name
        return [u for u, keep in zip(self.users, m) if keep], self.labels[m]

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def from_pairs(cls, pairs, split: str) -> "LabeledPool":
        pairs = list(pairs)
        return cls([u for u, _ in pairs], np.array([int(y) for _, y in pairs], dtype=int),
                   np.array([split] * len(pairs)))

    def merged(self, other: "LabeledPool") -> "LabeledPool":
        return LabeledPool(self.users + other.users, np.r_[self.labels, other.labels],
                           np.r_[self.split, other.split])


def _split_counts(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(math.floor(x)) for x in raw]
    rem = n - sum(counts)
    for i in sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))[:rem]:
        counts[i] += 1
    return counts


def build_pool(seeds, universe, rng: np.random.Generator, fractions=DEFAULT_FRACTIONS,
               ratio: int = NEG_RATIO) -> LabeledPool:
    """Seeds plus ``ratio`` x as many uniformly drawn non-seed users.

    Each class is split separately by ``fractions`` (train, validation,
    test) so every split keeps the class ratio.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise EvaluationError("fractions must be three non-negative numbers summing to 1")
    seeds = sorted(set(seeds))
    seed_set = set(seeds)
    others = sorted(u for u in set(universe) if u not in seed_set)
    need = ratio * len(seeds)
    if len(others) < need:
        raise EvaluationError(f"need {need} non-seed users, universe has {len(others)}")
    negatives = [others[i] for i in np.sort(rng.choice(len(others), need, replace=False))]
    users, labels, split = [], [], []
    for group, y in ((seeds, 1), (negatives, 0)):
        perm = rng.permutation(len(group))
        counts = _split_counts(len(group), fractions)
        names = np.repeat(np.array(SPLITS), counts)
        for j, i in enumerate(perm):
            users.append(group[i])
            labels.append(y)
            split.append(names[j])
    order = sorted(range(len(users)), key=lambda i: users[i])
    return LabeledPool([users[i] for i in order], np.array([labels[i] for i in order], dtype=int),
                       np.array([split[i] for i in order]))


# ----------------------------------------------------------------------
# logistic regression


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    history: list[float] = field(default_factory=list, repr=False)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        return _sigmoid(Z @ self.weights + self.bias)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def fit_logistic(X, y, l2: float = 1e-4, iters: int = 500, lr: float = 0.1) -> LogisticModel:
    """Full-batch gradient descent on mean cross-entropy plus l2/2 * |w|^2.

    Features are standardised on the training data; constant columns are
    left centred at zero. The bias is not penalised.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isfinite(X).all():
        raise EvaluationError("non-finite features")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    n, p = Z.shape
    w = np.zeros(p)
    b = 0.0
    hist = []
    for _ in range(iters):
        prob = _sigmoid(Z @ w + b)
        eps = 1e-15
        hist.append(float(-np.mean(y * np.log(prob + eps) + (1 - y) * np.log(1 - prob + eps))))
        err = prob - y
        w -= lr * (Z.T @ err / n + l2 * w)
        b -= lr * err.mean()
    return LogisticModel(w, b, mean, scale, hist)


def _feature_matrix(features: dict[str, np.ndarray], users: list[str]) -> np.ndarray:
    rows = []
    for u in users:
        if u not in features:
            raise EvaluationError(f"no features for user {u}")
        v = np.asarray(features[u], dtype=float)
        if not np.isfinite(v).all():
            raise EvaluationError(f"non-finite features for user {u}")
        rows.append(v)
    return np.array(rows)


def lr_baseline(features: dict[str, np.ndarray], pool: LabeledPool, score_split: str = "test",
                **kw) -> tuple[np.ndarray, LogisticModel]:
    """Fit on the train split, return probabilities for ``score_split``."""
    tr_users, tr_y = pool.part("train")
    if len(set(tr_y.tolist())) < 2:
        raise EvaluationError("training split needs both classes")
    model = fit_logistic(_feature_matrix(features, tr_users), tr_y, **kw)
    users, _ = pool.part(score_split)
    if not users:
        return np.zeros(0), model
    return model.predict_proba(_feature_matrix(features, users)), model


# ----------------------------------------------------------------------
# raw demography features


_DATE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")


def parse_literal(lit: str) -> float:
    """Numeric value of a literal: float, or ISO date as a decimal year."""
    m = _DATE.match(lit)
    if m:
        y, mo, d = (int(x) for x in m.groups())
        start = date(y, 1, 1).toordinal()
        span = date(y + 1, 1, 1).toordinal() - start
        return y + (date(y, mo, d).toordinal() - start) / span
    try:
        return float(lit)
    except ValueError:
        return float("nan")


def demography_features(attributes: list[tuple[str, str, str]]) -> dict[str, np.ndarray]:
    """One numeric column per attribute relation; absent values are NaN."""
    rels = sorted({r for _, r, _ in attributes})
    col = {r: i for i, r in enumerate(rels)}
    out: dict[str, np.ndarray] = {}
    for u, r, lit in attributes:
        if u not in out:
            out[u] = np.full(len(rels), np.nan)
        out[u][col[r]] = parse_literal(lit)
    return out


def random_features(users, dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {u: rng.normal(size=dim) for u in sorted(users)}


# ----------------------------------------------------------------------
# feature export for downstream classifiers


def feature_rows(fused: dict[str, np.ndarray], pool: LabeledPool, dim: int):
    """(user, label, vector, missing flag) per pool user."""
    rows = []
    for u, y in zip(pool.users, pool.labels.tolist()):
        v = fused.get(u)
        if v is None:
            rows.append((u, y, np.zeros(dim), 1))
        else:
            rows.append((u, y, np.asarray(v, dtype=float), 0))
    return rows


def export_features(path, fused: dict[str, np.ndarray], pool: LabeledPool, dim: int | None = None) -> np.ndarray:
    """Write ``user<TAB>label<TAB>v1,...,vd<TAB>missing_flag`` and return the matrix.

    The returned matrix has the embedding columns followed by the flag.
    """
    if dim is None:
        dim = len(next(iter(fused.values()))) if fused else 0
    rows = feature_rows(fused, pool, dim)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, y, v, flag in rows:
            fh.write(f"{u}\t{y}\t{','.join(repr(float(x)) for x in v)}\t{flag}\n")
    return np.array([np.r_[v, flag] for _, _, v, flag in rows]).reshape(len(rows), dim + 1)


def read_features(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    users, labels, mat = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            u, y, vec, flag = line.rstrip("\n").split("\t")
            users.append(u)
            labels.append(int(y))
            vals = [float(x) for x in vec.split(",")] if vec else []
            mat.append(vals + [float(flag)])
    return users, np.array(labels, dtype=int), np.array(mat)


def write_report(path, reports: dict[str, MetricReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method,precision,pr_auc,accuracy,threshold\n")
        for name, r in reports.items():
            fh.write(f"{name},{r.precision:.6f},{r.pr_auc:.6f},{r.accuracy:.6f},{r.threshold:.6f}\n")


def run_experiment(config):
    """End-to-end train, fuse and evaluate; see :func:`eclm.pipeline.run_experiment`."""
    from .pipeline import run_experiment as _run

    return _run(config)
