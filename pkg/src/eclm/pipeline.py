"""Stage plumbing shared by the command line and ``run_experiment``."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .expansion import score_candidates
from .fusion import FusedEmbedding, fuse_all, write_fused
from .kg_store import KnowledgeGraph, family_subgraph, load_attributes, load_triples, read_triples_file
from .trainer import VIEWS, EmbeddingTable, LossHistory, TrainConfig, read_embeddings, save_table, train_view

log = logging.getLogger(__name__)

VIEW_SOURCES = {
    "demography": ("attributes.tsv",),
    "loyalty": ("loyalty.tsv",),
    "ichiba": ("ichiba.tsv",),
    "travel": ("travel.tsv",),
    "family": ("family.tsv", "ichiba.tsv", "travel.tsv"),
}
METHODS = ("E-CLM", "E-CLM++", "LR")


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def read_pool_file(path) -> list[tuple[str, int]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                u, y = line.rstrip("\n").split("\t")
                out.append((u, int(y)))
    return out


def load_view_kg(data_dir, view: str, users: list[str] | None = None) -> KnowledgeGraph:
    data_dir = Path(data_dir)
    types_path = data_dir / "entity_types.tsv"
    types = types_path if types_path.exists() else None
    files = [data_dir / f for f in VIEW_SOURCES[view]]
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"{f} (produced by `gen`)")
    if view == "demography":
        return load_attributes(files[0], KnowledgeGraph.empty(view), entity_types=types)
    if view == "family":
        if users is None:
            users = read_lines(data_dir / "users.txt")
        kg = load_triples([f for f in files if f.stat().st_size > 0], view, entity_types=types)
        return family_subgraph(kg, users)
    return load_triples(files, view, entity_types=types)


def train_views(data_dir, views, cfg: TrainConfig, overrides: dict | None = None,
                out_dir=None, parallel: bool = False) -> dict[str, tuple[EmbeddingTable, LossHistory]]:
    """Train the requested views; each view owns its RNG stream."""
    overrides = overrides or {}
    users = read_lines(Path(data_dir) / "users.txt") if (Path(data_dir) / "users.txt").exists() else None

    def one(view):
        kg = load_view_kg(data_dir, view, users)
        vcfg = replace(cfg, **overrides.get(view, {}))
        table, hist = train_view(kg, view, vcfg)
        if out_dir is not None:
            save_table(table, out_dir, hist)
        return view, (table, hist)

    views = [v for v in VIEWS if v in views]
    if parallel and len(views) > 1:
        with ThreadPoolExecutor(max_workers=len(views)) as pool:
            results = list(pool.map(one, views))
    else:
        results = [one(v) for v in views]
    return dict(results)


def user_tables(tables: dict[str, EmbeddingTable], users: list[str]) -> dict[str, tuple[list[str], np.ndarray]]:
    out = {}
    for view, t in tables.items():
        labels, rows = [], []
        for u in users:
            v = t.vector(u)
            if v is not None:
                labels.append(u)
                rows.append(v)
        out[view] = (labels, np.array(rows).reshape(len(rows), t.dim))
    return out


def load_view_tables(views_dir, views, users: list[str]) -> dict[str, tuple[list[str], np.ndarray]]:
    """User rows of each trained view file, for fusion."""
    out = {}
    wanted = set(users)
    for view in views:
        path = Path(views_dir) / f"{view}.emb"
        if not path.exists():
            raise FileNotFoundError(f"{path} (produced by `train`)")
        labels, M = read_embeddings(path)
        keep = [i for i, u in enumerate(labels) if u in wanted]
        out[view] = ([labels[i] for i in keep], M[keep])
    return out


def fused_dict(fused: list[FusedEmbedding]) -> dict[str, np.ndarray]:
    return {f.user: f.vector for f in fused}


# ----------------------------------------------------------------------
# evaluation stage


@dataclass
class EvalConfig:
    methods: tuple[str, ...] = METHODS
    mode: str = "centroid"
    fractions: tuple[float, float, float] = ev.DEFAULT_FRACTIONS
    lr_features: str = "demography"  # or "random"
    seed: int = 0


@dataclass
class ExperimentResult:
    reports: dict[str, ev.MetricReport]
    test_users: list[str]
    test_labels: np.ndarray
    test_scores: dict[str, np.ndarray]
    precision_at_positives: dict[str, float] = field(default_factory=dict)
    validation_pr_auc: dict[str, float] = field(default_factory=dict)


def _ecml_scores(emb: dict[str, np.ndarray], query: list[str], users: list[str], mode: str) -> np.ndarray:
    q = [u for u in query if u in emb]
    ranked = dict(score_candidates(q, [u for u in users if u in emb], emb, mode))
    return np.array([ranked.get(u, -1.0) for u in users])


def evaluate_campaign(data_dir, fused: dict[str, np.ndarray], cfg: EvalConfig) -> ExperimentResult:
    data_dir = Path(data_dir)
    rng = np.random.default_rng(cfg.seed)
    universe = read_lines(data_dir / "users.txt")
    seeds = read_lines(data_dir / "seeds.txt")
    test_path = data_dir / "test_pool.tsv"
    if test_path.exists():
        test = ev.LabeledPool.from_pairs(read_pool_file(test_path), "test")
        held = set(test.users)
        f_tr, f_va = cfg.fractions[0], cfg.fractions[1]
        trval = ev.build_pool(seeds, [u for u in universe if u not in held], rng,
                              (f_tr / (f_tr + f_va), f_va / (f_tr + f_va), 0.0))
        pool = trval.merged(test)
    else:
        pool = ev.build_pool(seeds, universe, rng, cfg.fractions)

    tr_users, tr_y = pool.part("train")
    va_users, va_y = pool.part("validation")
    te_users, te_y = pool.part("test")
    query = [u for u, y in zip(tr_users, tr_y) if y == 1]
    dim = len(next(iter(fused.values())))

    reports, scores, p_at, va_auc = {}, {}, {}, {}
    for method in cfg.methods:
        if method == "E-CLM":
            va_s = _ecml_scores(fused, query, va_users, cfg.mode)
            te_s = _ecml_scores(fused, query, te_users, cfg.mode)
        elif method in ("E-CLM++", "LR"):
            if method == "E-CLM++":
                feats = {u: np.r_[v, flag] for u, _, v, flag in ev.feature_rows(fused, pool, dim)}
            elif cfg.lr_features == "random":
                feats = ev.random_features(pool.users, dim, np.random.default_rng(cfg.seed + 1))
            else:
                attrs = [tuple(r) for r in read_triples_file(data_dir / "attributes.tsv")]
                feats = ev.demography_features(attrs)
            va_s, model = ev.lr_baseline(feats, pool, "validation")
            te_s, _ = ev.lr_baseline(feats, pool, "test")
        else:
            raise StageError("eval", f"unknown method {method!r}")
        both = len(va_s) and 0 < va_y.sum() < len(va_y)
        thr = ev.best_f1_threshold(va_s, va_y) if both else 0.5
        va_auc[method] = ev.pr_auc(va_s, va_y) if both else float("nan")
        reports[method] = ev.evaluate(te_s, te_y, thr)
        scores[method] = te_s
        p_at[method] = ev.precision_at_k(te_s, te_y, int(te_y.sum()))
    return ExperimentResult(reports, te_users, te_y, scores, p_at, va_auc)


# ----------------------------------------------------------------------
# in-process end-to-end run


@dataclass
class ExperimentConfig:
    data_dir: Path
    out_dir: Path | None = None
    views: tuple[str, ...] = VIEWS
    train: TrainConfig = field(default_factory=TrainConfig)
    view_overrides: dict = field(default_factory=dict)
    fusion_iters: int = 1
    eval: EvalConfig = field(default_factory=EvalConfig)
    parallel_views: bool = False


def run_experiment(cfg: ExperimentConfig, trained: dict | None = None) -> ExperimentResult:
    """Train views, fuse, and evaluate every configured method.

    ``trained`` may carry already trained tables keyed by view, so ablations
    can re-fuse subsets without retraining.
    """
    data_dir = Path(cfg.data_dir)
    try:
        if trained is None:
            trained = train_views(data_dir, cfg.views, cfg.train, cfg.view_overrides,
                                  None if cfg.out_dir is None else Path(cfg.out_dir) / "views",
                                  cfg.parallel_views)
    except Exception as exc:
        raise StageError("train", str(exc)) from exc
    try:
        users = read_lines(data_dir / "users.txt")
        tables = {v: trained[v][0] if isinstance(trained[v], tuple) else trained[v]
                  for v in cfg.views}
        fused = fuse_all(users, user_tables(tables, users), cfg.fusion_iters)
        if cfg.out_dir is not None:
            out = Path(cfg.out_dir) / "fused"
            out.mkdir(parents=True, exist_ok=True)
            write_fused(fused, out / "fused.emb", out / "fused.weights.tsv")
    except Exception as exc:
        raise StageError("fuse", str(exc)) from exc
    try:
        result = evaluate_campaign(data_dir, fused_dict(fused), cfg.eval)
        if cfg.out_dir is not None:
            ev.write_report(Path(cfg.out_dir) / "report.csv", result.reports)
    except Exception as exc:
        raise StageError("eval", str(exc)) from exc
    return result
