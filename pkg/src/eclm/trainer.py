"""Mini-batch SGD for the three view loss families.

Structural views (ichiba, travel, family) use a translation score with a
margin ranking loss, the demography view scores users against n-gram
compositions of their literal attributes, and the loyalty view pulls users
towards a CNN encoding of (relation, value) pairs through a softplus loss.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import _kernels as K
from .encoders import (
    DEFAULT_FILTERS,
    DEFAULT_NGRAM,
    DEFAULT_WIDTH,
    CnnParams,
    cnn_backward,
    cnn_forward,
    ngram_coefficients,
    ngram_encode,
)
from .kg_store import AttributeCorruptor, KnowledgeGraph, Vocab, corrupt_batch

log = logging.getLogger(__name__)

VIEWS = ("demography", "loyalty", "ichiba", "travel", "family")
VIEW_CODES = {"d": "demography", "l": "loyalty", "i": "ichiba", "t": "travel", "f": "family"}
STRUCTURAL = ("ichiba", "travel", "family")

DIM_GRID = (50, 75, 100)
LR_GRID = (0.001, 0.01, 0.1)
GAMMA_GRID = (1.0, 5.0, 10.0)


class TrainingError(RuntimeError):
    pass


def view_kind(view: str) -> str:
    if view == "demography":
        return "literal"
    if view == "loyalty":
        return "cnn"
    return "translation"


# ----------------------------------------------------------------------
# scores and losses


def transe_score(h, r, t) -> float:
    return float(np.abs(np.asarray(h) + np.asarray(r) - np.asarray(t)).sum())


def kge_margin_loss(pos_score: float, neg_score: float, gamma: float) -> float:
    return max(0.0, gamma + pos_score - neg_score)


def demography_loss(u, r, phi_pos, u_neg, r_neg, phi_neg, gamma: float, alpha: float = 1.0) -> float:
    f_pos = transe_score(u, r, phi_pos)
    f_neg = transe_score(u_neg, r_neg, phi_neg)
    return max(0.0, gamma + alpha * (f_pos - f_neg))


def loyalty_loss(u, cnn_out) -> float:
    """log(1 + exp(||u - cnn_out||_1)); a batch of rows is summed."""
    diff = np.atleast_2d(np.asarray(u, dtype=float) - np.asarray(cnn_out, dtype=float))
    return float(K.softplus(np.abs(diff).sum(axis=1)).sum())


# ----------------------------------------------------------------------
# analytic per-instance gradients (used for grad checks and kernel tests)


def kge_instance_grad(h, r, t, hn, tn, gamma):
    """Loss and gradients of one margin term, corrupted triple (hn, r, tn)."""
    dp = h + r - t
    dn = hn + r - tn
    loss = gamma + np.abs(dp).sum() - np.abs(dn).sum()
    if loss <= 0:
        z = np.zeros_like(h)
        return 0.0, {"h": z, "r": z.copy(), "t": z.copy(), "hn": z.copy(), "tn": z.copy()}
    gp, gn = np.sign(dp), np.sign(dn)
    return float(loss), {"h": gp, "r": gp - gn, "t": -gp, "hn": -gn, "tn": gn}


def demography_instance_grad(u, r, C, chars_pos, un, chars_neg, gamma, alpha, N):
    phi_p = ngram_encode(chars_pos, C, N)
    phi_n = ngram_encode(chars_neg, C, N)
    dp = u + r - phi_p
    dn = un + r - phi_n
    loss = gamma + alpha * (np.abs(dp).sum() - np.abs(dn).sum())
    gC = np.zeros_like(C)
    if loss <= 0:
        z = np.zeros_like(u)
        return 0.0, {"u": z, "r": z.copy(), "un": z.copy(), "C": gC}
    gp, gn = alpha * np.sign(dp), alpha * np.sign(dn)
    for c, w in zip(np.asarray(chars_pos), ngram_coefficients(len(chars_pos), N)):
        gC[c] -= w * gp
    for c, w in zip(np.asarray(chars_neg), ngram_coefficients(len(chars_neg), N)):
        gC[c] += w * gn
    return float(loss), {"u": gp, "r": gp - gn, "un": -gn, "C": gC}


def loyalty_instance_grad(u, r, v, params: CnnParams):
    out = cnn_forward(r, v, params)
    diff = u - out
    x = np.abs(diff).sum()
    loss = float(K.softplus(x))
    s = 1.0 / (1.0 + math.exp(-x))
    gu = s * np.sign(diff)
    g = cnn_backward(r, v, params, -gu)
    return loss, {"u": gu, "r": g.rel, "v": g.val, "filters": g.filters,
                  "filter_bias": g.filter_bias, "proj": g.proj, "proj_bias": g.proj_bias}


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _fd(fun, params: dict, h: float) -> dict:
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            fp = fun()
            arr[idx] = old - h
            fm = fun()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads[name] = g
    return grads


def _random_instance(kind, rng, d, k, N, gamma, alpha, kink_tol, n_chars=6):
    """Draw a parameter set away from every kink of the loss."""
    for _ in range(10_000):
        if kind == "kge":
            p = {n: rng.uniform(-1, 1, d) for n in ("h", "r", "t", "hn", "tn")}
            dp = p["h"] + p["r"] - p["t"]
            dn = p["hn"] + p["r"] - p["tn"]
            viol = gamma + np.abs(dp).sum() - np.abs(dn).sum()
            if abs(viol) < kink_tol or min(np.abs(dp).min(), np.abs(dn).min()) < kink_tol:
                continue
            fun = lambda: kge_margin_loss(transe_score(p["h"], p["r"], p["t"]),
                                          transe_score(p["hn"], p["r"], p["tn"]), gamma)
            grad = lambda: kge_instance_grad(p["h"], p["r"], p["t"], p["hn"], p["tn"], gamma)[1]
            return p, fun, grad
        if kind == "demography":
            p = {n: rng.uniform(-1, 1, d) for n in ("u", "r", "un")}
            p["C"] = rng.uniform(-1, 1, (n_chars, d))
            cp = rng.integers(0, n_chars, k)
            cn = rng.integers(0, n_chars, k)
            dp = p["u"] + p["r"] - ngram_encode(cp, p["C"], N)
            dn = p["un"] + p["r"] - ngram_encode(cn, p["C"], N)
            viol = gamma + alpha * (np.abs(dp).sum() - np.abs(dn).sum())
            if abs(viol) < kink_tol or min(np.abs(dp).min(), np.abs(dn).min()) < kink_tol:
                continue
            fun = lambda: demography_loss(p["u"], p["r"], ngram_encode(cp, p["C"], N), p["un"], p["r"],
                                          ngram_encode(cn, p["C"], N), gamma, alpha)
            grad = lambda: demography_instance_grad(p["u"], p["r"], p["C"], cp, p["un"], cn,
                                                    gamma, alpha, N)[1]
            return p, fun, grad
        if kind == "loyalty":
            cnn = CnnParams.init(d, rng, n_filters=2, width=2)
            cnn.filter_bias[:] = rng.uniform(-0.5, 0.5, cnn.n_filters)
            cnn.proj_bias[:] = rng.uniform(-0.5, 0.5, d)
            p = {"u": rng.uniform(-1, 1, d), "r": rng.uniform(-1, 1, d), "v": rng.uniform(-1, 1, d),
                 "filters": cnn.filters, "filter_bias": cnn.filter_bias,
                 "proj": cnn.proj, "proj_bias": cnn.proj_bias}
            x = np.stack([p["r"], p["v"]])
            w = cnn.width
            win = np.lib.stride_tricks.sliding_window_view(x, w, axis=1)
            act = np.sort(np.tanh(np.einsum("frw,rpw->fp", cnn.filters, win) + cnn.filter_bias[:, None]), axis=1)
            if act.shape[1] > 1 and (act[:, -1] - act[:, -2]).min() < kink_tol:
                continue
            if np.abs(p["u"] - cnn_forward(p["r"], p["v"], cnn)).min() < kink_tol:
                continue
            fun = lambda: loyalty_loss(p["u"], cnn_forward(p["r"], p["v"], cnn))
            grad = lambda: loyalty_instance_grad(p["u"], p["r"], p["v"], cnn)[1]
            return p, fun, grad
        raise ValueError(f"unknown loss kind {kind!r}")
    raise RuntimeError("could not draw a kink-free instance")


def grad_check(kind: str, rng: np.random.Generator, h: float = 1e-5, d: int = 4, k: int = 3,
               N: int = DEFAULT_NGRAM, gamma: float = 1.0, alpha: float = 1.0,
               kink_tol: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error is max |analytic - numeric| over every parameter, divided by
    the largest gradient magnitude.

    ``kind`` is one of ``kge``, ``demography`` or ``loyalty``. Instances
    within ``kink_tol`` of an L1, hinge or max-pool kink are redrawn.
    """
    params, fun, grad = _random_instance(kind, rng, d, k, N, gamma, alpha, kink_tol)
    analytic = grad()
    numeric = _fd(fun, params, h)
    # one scale for the whole gradient, so exactly-zero blocks (e.g. r when
    # positive and negative signs cancel) are judged against the rest
    a = np.concatenate([analytic[n].ravel() for n in numeric])
    b = np.concatenate([numeric[n].ravel() for n in numeric])
    return _rel_error(a, b)


# ----------------------------------------------------------------------
# configuration and tables


@dataclass
class TrainConfig:
    d: int = 50
    lr: float = 0.01
    gamma: float = 1.0
    alpha: float = 1.0
    batch_size: int = 10_000
    max_epochs: int = 500
    N: int = DEFAULT_NGRAM
    negatives_per_positive: int = 1
    seed: int = 0
    patience: int = 20
    min_epochs: int = 50
    val_split: float = 0.05
    n_filters: int = DEFAULT_FILTERS
    filter_width: int = DEFAULT_WIDTH

    def __post_init__(self):
        if self.d < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("d, batch_size must be positive and max_epochs >= 0")
        if self.gamma <= 0 or self.alpha <= 0:
            raise ValueError("gamma and alpha must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.val_split < 1.0:
            raise ValueError("val_split must be in [0, 1)")
        if self.patience < 1 or self.min_epochs < 0:
            raise ValueError("patience must be >= 1 and min_epochs >= 0")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingTable:
    view: str
    entities: Vocab
    relations: Vocab
    entity_emb: np.ndarray
    relation_emb: np.ndarray
    present: np.ndarray  # entity has at least one triple in the view
    chars: Vocab | None = None
    char_emb: np.ndarray | None = None
    cnn: CnnParams | None = None
    N: int = DEFAULT_NGRAM

    @property
    def dim(self) -> int:
        return self.entity_emb.shape[1]

    def vector(self, label: str) -> np.ndarray | None:
        i = self.entities.get(label)
        if i is None or not self.present[i]:
            return None
        return self.entity_emb[i]

    def present_labels(self) -> list[str]:
        return [lab for lab, p in zip(self.entities.labels, self.present) if p]

    def arrays(self) -> list[np.ndarray]:
        out = [self.entity_emb, self.relation_emb]
        if self.char_emb is not None:
            out.append(self.char_emb)
        if self.cnn is not None:
            out.extend(self.cnn.arrays())
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


@dataclass
class LossHistory:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)
    stopped_early: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for i, (tr, va) in enumerate(zip(self.train, self.val), start=1):
                fh.write(f"{i},{tr:.9g},{va:.9g}\n")


def _uniform(rng, shape, d):
    bound = 6.0 / math.sqrt(d)
    return rng.uniform(-bound, bound, shape)


def _literal_csr(literals: list[str], chars: Vocab, N: int):
    """Intern literals and flatten their characters and n-gram weights."""
    lit_vocab = Vocab.sorted_from(literals)
    ptr = np.zeros(len(lit_vocab) + 1, dtype=np.int64)
    all_chars, all_coef = [], []
    unk = chars.index.get("\x00", 0)
    for i, lit in enumerate(lit_vocab.labels):
        ids = [chars.get(c, unk) for c in lit]
        all_chars.extend(ids)
        all_coef.extend(ngram_coefficients(len(ids), N).tolist())
        ptr[i + 1] = ptr[i] + len(ids)
    lit_ids = np.array([lit_vocab[x] for x in literals], dtype=np.int64)
    return lit_vocab, lit_ids, ptr, np.array(all_chars, dtype=np.int64), np.array(all_coef)


class _ViewProblem:
    """Binds one view's data, parameters and kernels for the epoch loop."""

    def __init__(self, kg: KnowledgeGraph, view: str, cfg: TrainConfig, rng: np.random.Generator):
        self.kg, self.view, self.cfg = kg, view, cfg
        self.kind = view_kind(view)
        d = cfg.d
        E = _uniform(rng, (kg.n_entities, d), d)
        K.renorm_rows(E)
        R = _uniform(rng, (max(len(kg.relations), 1), d), d)
        self.table = EmbeddingTable(view, kg.entities, kg.relations, E, R,
                                    present=kg.degree() > 0, N=cfg.N)
        if self.kind == "literal":
            if kg.n_attributes == 0:
                raise TrainingError(f"{view}: no attribute triples to train on")
            C = _uniform(rng, (len(kg.chars), d), d)
            K.renorm_rows(C)
            self.table.chars, self.table.char_emb = kg.chars, C
            _, self.lit_ids, self.lit_ptr, self.lit_chars, self.lit_coef = _literal_csr(
                kg.attr_literal, kg.chars, cfg.N)
            self.corruptor = AttributeCorruptor(kg, self.lit_ids)
            self.n = kg.n_attributes
        else:
            if kg.n_triples == 0:
                raise TrainingError(f"{view}: no relational triples to train on")
            self.n = kg.n_triples
            if self.kind == "cnn":
                if cfg.filter_width > d:
                    raise ValueError(f"filter width {cfg.filter_width} exceeds d={d}")
                self.table.cnn = CnnParams.init(d, rng, cfg.n_filters, cfg.filter_width)

    def negatives(self, rows: np.ndarray, rng):
        rows = np.repeat(rows, self.cfg.negatives_per_positive)
        if self.kind == "literal":
            return rows, self.corruptor.corrupt(rows, rng)
        if self.kind == "translation":
            return rows, corrupt_batch(self.kg, self.kg.triples[rows], rng)
        return rows, None  # loyalty loss has no negative term

    def step(self, rows, neg, lr, kern) -> float:
        t, cfg, kg = self.table, self.cfg, self.kg
        if self.kind == "translation":
            return kern.transe_step(t.entity_emb, t.relation_emb, kg.triples[rows], neg, cfg.gamma, lr)
        if self.kind == "literal":
            nu, nl = neg
            return kern.demography_step(
                t.entity_emb, t.relation_emb, t.char_emb, kg.attr_subject[rows], kg.attr_relation[rows],
                self.lit_ids[rows], nu, nl, self.lit_ptr, self.lit_chars, self.lit_coef,
                cfg.gamma, cfg.alpha, lr)
        tr = kg.triples[rows]
        c = t.cnn
        return kern.loyalty_step(t.entity_emb, t.relation_emb, c.filters, c.filter_bias, c.proj,
                                 c.proj_bias, tr[:, 0], tr[:, 1], tr[:, 2], lr)

    def loss(self, rows, neg) -> float:
        t, cfg, kg = self.table, self.cfg, self.kg
        if len(rows) == 0:
            return float("nan")
        if self.kind == "translation":
            return K.transe_batch_loss(t.entity_emb, t.relation_emb, kg.triples[rows], neg, cfg.gamma)
        if self.kind == "literal":
            nu, nl = neg
            return K.demography_batch_loss(
                t.entity_emb, t.relation_emb, t.char_emb, kg.attr_subject[rows], kg.attr_relation[rows],
                self.lit_ids[rows], nu, nl, self.lit_ptr, self.lit_chars, self.lit_coef, cfg.gamma, cfg.alpha)
        tr = kg.triples[rows]
        c = t.cnn
        return K.loyalty_batch_loss(t.entity_emb, t.relation_emb, c.filters, c.filter_bias, c.proj,
                                    c.proj_bias, tr[:, 0], tr[:, 1], tr[:, 2])


def train_view(kg: KnowledgeGraph, view: str, cfg: TrainConfig, val_split: float | None = None,
               backend: str | None = None) -> tuple[EmbeddingTable, LossHistory]:
    """Train one view's embedding table.

    Positives are shuffled each epoch, each batch draws fresh negatives and
    takes one SGD step. Training stops after ``max_epochs`` or when the
    validation loss has not improved for ``patience`` epochs, counted only
    once ``min_epochs`` have run. Reported losses are means per positive.
    """
    kern = K.backend if backend is None else K.get_backend(backend)
    val_split = cfg.val_split if val_split is None else val_split
    ss = np.random.SeedSequence([cfg.seed, VIEWS.index(view) if view in VIEWS else 99])
    init_rng, split_rng, train_rng, val_rng = (np.random.default_rng(s) for s in ss.spawn(4))

    prob = _ViewProblem(kg, view, cfg, init_rng)
    n = prob.n
    perm = split_rng.permutation(n)
    n_val = int(round(val_split * n)) if n >= 20 else 0
    val_rows, train_rows = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    val_rows_rep, val_neg = prob.negatives(val_rows, val_rng)

    hist = LossHistory()
    batch = min(cfg.batch_size, len(train_rows))
    best, since_best = math.inf, 0
    for epoch in range(cfg.max_epochs):
        order = train_rows[train_rng.permutation(len(train_rows))]
        total = 0.0
        for b, start in enumerate(range(0, len(order), batch)):
            rows, neg = prob.negatives(order[start:start + batch], train_rng)
            total += prob.step(rows, neg, cfg.lr, kern)
            if not prob.table.all_finite():
                raise TrainingError(f"{view}: non-finite parameters after epoch {epoch + 1} batch {b}")
        hist.train.append(total / (len(train_rows) * cfg.negatives_per_positive))
        vloss = prob.loss(val_rows_rep, val_neg) / max(len(val_rows_rep), 1)
        hist.val.append(vloss)
        if n_val:
            if vloss < best:
                best, since_best = vloss, 0
            else:
                since_best += 1
                if since_best >= cfg.patience and epoch + 1 >= cfg.min_epochs:
                    hist.stopped_early = True
                    log.info("%s: early stop at epoch %d", view, epoch + 1)
                    break
    return prob.table, hist


# ----------------------------------------------------------------------
# embedding files


def format_vector(v: np.ndarray) -> str:
    return ",".join(format(float(x), ".9g") for x in v)


def write_embeddings(path, labels: list[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=float)
    d = matrix.shape[1] if matrix.ndim == 2 else 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"dim={d} count={len(labels)}\n")
        for lab, row in zip(labels, matrix):
            fh.write(f"{lab}\t{format_vector(row)}\n")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        meta = dict(x.split("=", 1) for x in header)
        d, count = int(meta["dim"]), int(meta["count"])
        labels, rows = [], []
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            lab, vec = line.split("\t")
            labels.append(lab)
            rows.append([float(x) for x in vec.split(",")])
    if len(labels) != count:
        raise ValueError(f"{path}: header count {count} but {len(labels)} rows")
    mat = np.array(rows, dtype=float).reshape(len(rows), d)
    return labels, mat


def save_table(table: EmbeddingTable, out_dir, history: LossHistory | None = None) -> dict[str, Path]:
    """Write entity rows of present entities, relation rows and loss history."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = np.nonzero(table.present)[0]
    paths = {
        "entities": out_dir / f"{table.view}.emb",
        "relations": out_dir / f"{table.view}.relations.emb",
    }
    write_embeddings(paths["entities"], [table.entities.label(i) for i in idx], table.entity_emb[idx])
    write_embeddings(paths["relations"], table.relations.labels, table.relation_emb[:len(table.relations)])
    if history is not None:
        paths["history"] = out_dir / f"{table.view}.loss.csv"
        history.to_csv(paths["history"])
    return paths
