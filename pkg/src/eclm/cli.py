"""Command line entry point: ``eclm gen|train|fuse|expand|eval|gridsearch``.

Every stage reads its inputs from a run directory (``--out``), writes its
outputs there and leaves a JSON manifest under ``manifests/``. The layout
of the run directory is::

    data/       generated dataset, seeds.txt, test_pool.tsv   (gen)
    views/      <view>.emb, <view>.relations.emb, loss csv     (train)
    fused/      fused.emb, fused.weights.tsv                   (fuse)
    expand/     expansion.csv                                  (expand)
    report.csv                                                 (eval)
    gridsearch.csv                                             (gridsearch)
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, kernel_backend
from . import evaluation as ev
from . import pipeline as pl
from . import synthgen as sg
from .expansion import MODES, build_partition_index, expand_threshold, expand_top_n, read_seed_list, score_candidates
from .fusion import fuse_all, read_fused, write_fused
from .trainer import DIM_GRID, GAMMA_GRID, LR_GRID, VIEW_CODES, VIEWS, TrainConfig

log = logging.getLogger("eclm")

PRODUCER = {
    "data": "gen",
    "views": "train",
    "fused": "fuse",
}


class CliError(RuntimeError):
    pass


class ConfigError(CliError):
    pass


# ----------------------------------------------------------------------
# configuration


@dataclass
class ExpandOptions:
    mode: str = "centroid"
    threshold: float | None = None
    top_n: int | None = None
    seeds: str = ""
    use_index: bool = False
    n_probe: int = 0


@dataclass
class GridOptions:
    dims: tuple[int, ...] = DIM_GRID
    lrs: tuple[float, ...] = LR_GRID
    gammas: tuple[float, ...] = GAMMA_GRID


@dataclass
class RunConfig:
    gen: sg.GenConfig = field(default_factory=sg.GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    view_overrides: dict = field(default_factory=dict)
    views: tuple[str, ...] = VIEWS
    fusion_iters: int = 1
    expand: ExpandOptions = field(default_factory=ExpandOptions)
    eval: pl.EvalConfig = field(default_factory=pl.EvalConfig)
    grid: GridOptions = field(default_factory=GridOptions)
    seed: int | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["views"] = list(self.views)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_matrix(text: str) -> list[list[float]]:
    return [[float(x) for x in row.split(",")] for row in text.split(";") if row.strip()]


def _coerce(value: str, default, name: str):
    """Convert an INI string using the type of the field's default."""
    v = value.strip()
    if name == "cross_service_activity":
        return None if v.lower() in ("", "none") else _parse_matrix(v)
    if name in ("threshold", "top_n"):
        if v.lower() in ("", "none"):
            return None
        return float(v) if name == "threshold" else int(v)
    if isinstance(default, bool):
        return _parse_bool(v)
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    if isinstance(default, tuple):
        items = [x.strip() for x in v.split(",") if x.strip()]
        if default and isinstance(default[0], (int, float)):
            return tuple(type(default[0])(x) for x in items)
        return tuple(items)
    return v


def _apply(obj, section: configparser.SectionProxy, skip=()):
    names = {f.name for f in fields(obj)} - set(skip)
    changes = {}
    for key, value in section.items():
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        try:
            changes[key] = _coerce(value, getattr(obj, key), key)
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from exc
    return replace(obj, **changes)


def parse_views(text: str) -> tuple[str, ...]:
    out = []
    for code in (c.strip() for c in text.split(",") if c.strip()):
        view = VIEW_CODES.get(code, code)
        if view not in VIEWS:
            raise ConfigError(f"unknown view {code!r}; use a subset of d,l,i,t,f")
        out.append(view)
    if not out:
        raise ConfigError("no views selected")
    return tuple(v for v in VIEWS if v in out)


def load_config(path) -> RunConfig:
    """Read a sectioned INI file; unknown sections and keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp.read(path, encoding="utf-8")
    cfg = RunConfig()
    for name in cp.sections():
        sec = cp[name]
        if name == "gen":
            try:
                cfg.gen = _apply(cfg.gen, sec)
            except sg.GenError as exc:
                raise ConfigError(f"[gen] {exc}") from exc
        elif name == "train":
            cfg.train = _apply(cfg.train, sec)
        elif name.startswith("train."):
            view = name.split(".", 1)[1]
            if view not in VIEWS:
                raise ConfigError(f"[{name}] unknown view {view!r}")
            _apply(cfg.train, sec)  # validates keys and values
            cfg.view_overrides[view] = {k: _coerce(v, getattr(cfg.train, k), k) for k, v in sec.items()}
        elif name == "fusion":
            for key, value in sec.items():
                if key == "iters":
                    cfg.fusion_iters = int(value)
                elif key == "views":
                    cfg.views = parse_views(value)
                else:
                    raise ConfigError(f"[fusion] unknown key {key!r}")
        elif name == "expand":
            cfg.expand = _apply(cfg.expand, sec)
        elif name == "eval":
            cfg.eval = _apply(cfg.eval, sec)
        elif name == "gridsearch":
            cfg.grid = _apply(cfg.grid, sec)
        else:
            raise ConfigError(f"unknown section [{name}]")
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.expand.mode not in MODES or cfg.eval.mode not in MODES:
        raise ConfigError(f"expansion mode must be one of {MODES}")
    if cfg.expand.threshold is not None and not -1.0 <= cfg.expand.threshold <= 1.0:
        raise ConfigError("expand threshold must lie in [-1, 1]")
    if cfg.expand.top_n is not None and cfg.expand.top_n < 1:
        raise ConfigError("expand top_n must be >= 1")
    unknown = set(cfg.eval.methods) - set(pl.METHODS)
    if unknown:
        raise ConfigError(f"unknown evaluation methods {sorted(unknown)}")
    if cfg.eval.lr_features not in ("demography", "random"):
        raise ConfigError("lr_features must be demography or random")
    if len(cfg.eval.fractions) != 3 or abs(sum(cfg.eval.fractions) - 1.0) > 1e-9:
        raise ConfigError("eval fractions must be three numbers summing to 1")
    if cfg.fusion_iters < 1:
        raise ConfigError("fusion iters must be >= 1")


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    return replace(cfg, seed=seed, gen=replace(cfg.gen, seed=seed),
                   train=replace(cfg.train, seed=seed), eval=replace(cfg.eval, seed=seed))


# ----------------------------------------------------------------------
# run directory and manifests


@dataclass
class Run:
    out: Path
    cfg: RunConfig

    @property
    def data(self) -> Path:
        return self.out / "data"

    @property
    def views_dir(self) -> Path:
        return self.out / "views"

    @property
    def fused_emb(self) -> Path:
        return self.out / "fused" / "fused.emb"

    @property
    def fused_weights(self) -> Path:
        return self.out / "fused" / "fused.weights.tsv"

    def require(self, *paths: Path) -> None:
        """Fail before any work if an upstream artifact is missing."""
        for p in paths:
            if not p.exists():
                producer = PRODUCER.get(p.relative_to(self.out).parts[0], "gen")
                raise CliError(f"missing input {p}; run `eclm {producer}` first")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run: Run, stage: str, argv: list[str], t0: float,
                   inputs: list[Path], outputs: list[Path], extra: dict | None = None) -> Path:
    mdir = run.out / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    seed = run.cfg.seed if run.cfg.seed is not None else run.cfg.train.seed
    doc = {
        "stage": stage,
        "argv": argv,
        "config": run.cfg.to_dict(),
        "config_hash": run.cfg.digest(),
        "seed": seed,
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "kernel_backend": kernel_backend,
        "version": __version__,
        "inputs": {str(p.relative_to(run.out)): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {str(p.relative_to(run.out)): _sha256(p) for p in outputs if p.is_file()},
    }
    if extra:
        doc.update(extra)
    path = mdir / f"{stage}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=list) + "\n", encoding="utf-8")
    return path


# ----------------------------------------------------------------------
# stages


def _data_inputs(run: Run, views) -> list[Path]:
    names = {"users.txt"}
    for v in views:
        names.update(pl.VIEW_SOURCES[v])
    return [run.data / n for n in sorted(names)]


def cmd_gen(run: Run) -> dict:
    data = sg.generate(run.cfg.gen)
    if not data.ichiba and not data.travel:
        raise CliError("configuration produced no service triples")
    paths = list(sg.write_dataset(data, run.data).values())
    camp = sg.make_campaign(data.groups, run.cfg.gen.target_group, run.cfg.gen.seed_fraction,
                            np.random.default_rng(run.cfg.gen.seed))
    paths += list(sg.write_campaign(camp, run.data).values())
    return {"inputs": [], "outputs": paths,
            "extra": {"n_seeds": len(camp.seeds), "n_heldout": len(camp.heldout)}}


def cmd_train(run: Run, parallel: bool = False) -> dict:
    inputs = _data_inputs(run, run.cfg.views)
    run.require(*inputs)
    trained = pl.train_views(run.data, run.cfg.views, run.cfg.train, run.cfg.view_overrides,
                             run.views_dir, parallel)
    outputs = []
    for v in run.cfg.views:
        outputs += [run.views_dir / f"{v}.emb", run.views_dir / f"{v}.relations.emb",
                    run.views_dir / f"{v}.loss.csv"]
    epochs = {v: len(h.train) for v, (_, h) in trained.items()}
    return {"inputs": inputs, "outputs": outputs, "extra": {"epochs": epochs}}


def cmd_fuse(run: Run) -> dict:
    view_files = [run.views_dir / f"{v}.emb" for v in run.cfg.views]
    inputs = [run.data / "users.txt"] + view_files
    run.require(*inputs)
    users = pl.read_lines(run.data / "users.txt")
    tables = pl.load_view_tables(run.views_dir, run.cfg.views, users)
    fused = fuse_all(users, tables, run.cfg.fusion_iters)
    run.fused_emb.parent.mkdir(parents=True, exist_ok=True)
    write_fused(fused, run.fused_emb, run.fused_weights)
    n_deg = sum(f.degenerate for f in fused)
    if n_deg:
        log.warning("%d users fell back to uniform weights", n_deg)
    return {"inputs": inputs, "outputs": [run.fused_emb, run.fused_weights],
            "extra": {"n_fused": len(fused), "n_degenerate": n_deg}}


def _fused_embeddings(run: Run) -> dict[str, np.ndarray]:
    labels, M = read_fused(run.fused_emb)
    return dict(zip(labels, M))


def cmd_expand(run: Run) -> dict:
    opts = run.cfg.expand
    seeds_path = Path(opts.seeds) if opts.seeds else run.data / "seeds.txt"
    inputs = [run.fused_emb, seeds_path]
    run.require(run.fused_emb)
    if not seeds_path.exists():
        raise CliError(f"missing input {seeds_path}; run `eclm gen` first or set [expand] seeds")
    emb = _fused_embeddings(run)
    seeds = read_seed_list(seeds_path)
    present = [u for u in seeds.users if u in emb]
    if len(present) < len(seeds.users):
        log.warning("%d seeds have no fused embedding", len(seeds.users) - len(present))
    if not present:
        raise CliError("no seed has a fused embedding")
    if opts.use_index:
        result = _expand_with_index(emb, present, opts)
    else:
        scored = score_candidates(present, list(emb), emb, opts.mode)
        if opts.threshold is not None:
            result = expand_threshold(scored, opts.threshold, opts.mode)
        else:
            result = expand_top_n(scored, opts.top_n or len(scored), opts.mode)
    out = run.out / "expand" / "expansion.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    result.to_csv(out)
    return {"inputs": inputs, "outputs": [out], "extra": {"n_expanded": len(result.candidates)}}


def _expand_with_index(emb, seeds, opts: ExpandOptions):
    from .expansion import ExpansionResult, normalize_rows

    if opts.mode != "centroid":
        raise CliError("the partition index supports centroid mode only")
    labels = sorted(emb)
    index = build_partition_index(np.array([emb[u] for u in labels]), seed=0)
    q = normalize_rows(normalize_rows(np.array([emb[u] for u in seeds])).mean(axis=0))
    seed_set = set(seeds)
    k = (opts.top_n or len(labels)) + len(seeds)
    ids, scores = index.query(q, k, opts.n_probe or None)
    hits = [(labels[i], float(s)) for i, s in zip(ids, scores) if labels[i] not in seed_set]
    if opts.threshold is not None:
        return ExpansionResult([(u, s) for u, s in hits if s >= opts.threshold], opts.mode,
                               threshold=opts.threshold)
    return ExpansionResult(hits[:opts.top_n or len(hits)], opts.mode, top_n=opts.top_n)


def cmd_eval(run: Run) -> dict:
    inputs = [run.fused_emb, run.data / "users.txt", run.data / "seeds.txt"]
    if "LR" in run.cfg.eval.methods and run.cfg.eval.lr_features == "demography":
        inputs.append(run.data / "attributes.tsv")
    run.require(*inputs)
    pool_path = run.data / "test_pool.tsv"
    if pool_path.exists():
        inputs.append(pool_path)
    result = pl.evaluate_campaign(run.data, _fused_embeddings(run), run.cfg.eval)
    out = run.out / "report.csv"
    ev.write_report(out, result.reports)
    summary = {m: {"pr_auc": r.pr_auc, "precision": r.precision, "accuracy": r.accuracy}
               for m, r in result.reports.items()}
    for m, r in result.reports.items():
        print(f"{m:8s} precision={r.precision:.4f} pr_auc={r.pr_auc:.4f} accuracy={r.accuracy:.4f}")
    return {"inputs": inputs, "outputs": [out], "extra": {"metrics": summary}}


def cmd_gridsearch(run: Run, parallel: bool = False) -> dict:
    inputs = _data_inputs(run, run.cfg.views) + [run.data / "seeds.txt"]
    run.require(*inputs)
    users = pl.read_lines(run.data / "users.txt")
    ecfg = replace(run.cfg.eval, methods=("E-CLM",))
    rows = []
    g = run.cfg.grid
    for d in g.dims:
        for lr in g.lrs:
            for gamma in g.gammas:
                tcfg = replace(run.cfg.train, d=int(d), lr=float(lr), gamma=float(gamma))
                trained = pl.train_views(run.data, run.cfg.views, tcfg, run.cfg.view_overrides,
                                         None, parallel)
                tables = pl.user_tables({v: t for v, (t, _) in trained.items()}, users)
                fused = pl.fused_dict(fuse_all(users, tables, run.cfg.fusion_iters))
                res = pl.evaluate_campaign(run.data, fused, ecfg)
                row = (int(d), float(lr), float(gamma), res.validation_pr_auc["E-CLM"],
                       res.reports["E-CLM"].pr_auc)
                log.info("grid d=%d lr=%g gamma=%g val_pr_auc=%.4f", *row[:4])
                rows.append(row)
    out = run.out / "gridsearch.csv"
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("d,lr,gamma,val_pr_auc,test_pr_auc\n")
        for d, lr, gamma, va, te in rows:
            fh.write(f"{d},{lr:g},{gamma:g},{va:.6f},{te:.6f}\n")
    best = max(rows, key=lambda r: (r[3], -r[0], -r[1], -r[2]))
    print(f"best d={best[0]} lr={best[1]:g} gamma={best[2]:g} val_pr_auc={best[3]:.4f}")
    return {"inputs": inputs, "outputs": [out],
            "extra": {"best": {"d": best[0], "lr": best[1], "gamma": best[2], "val_pr_auc": best[3]}}}


# ----------------------------------------------------------------------
# argument parsing


def _global_args(p: argparse.ArgumentParser, suppress: bool) -> None:
    dflt = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=dflt, help="INI configuration file")
    p.add_argument("--seed", type=int, default=dflt, help="seed for every stage")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else "run", help="run directory")
    p.add_argument("--views", default=dflt, help="comma list of view codes d,l,i,t,f")
    p.add_argument("--parallel-views", action="store_true",
                   default=argparse.SUPPRESS if suppress else False,
                   help="train views concurrently (train, gridsearch)")
    p.add_argument("--fusion-iters", type=int, default=dflt, help="reference refinement rounds")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eclm", description="Multi-view lookalike expansion pipeline")
    _global_args(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate a synthetic dataset and campaign",
        "train": "train per-view embeddings",
        "fuse": "fuse view embeddings per user",
        "expand": "expand the seed list",
        "eval": "evaluate E-CLM, E-CLM++ and the LR baseline",
        "gridsearch": "search d x lr x gamma by validation PR-AUC",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        _global_args(sp, suppress=True)
        if name == "expand":
            sp.add_argument("--mode", choices=MODES)
            sp.add_argument("--threshold", type=float)
            sp.add_argument("--top-n", type=int)
            sp.add_argument("--seeds", help="seed list file (default data/seeds.txt)")
    return parser


STAGES = {
    "gen": cmd_gen,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "expand": cmd_expand,
    "eval": cmd_eval,
    "gridsearch": cmd_gridsearch,
}


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.views:
        cfg.views = parse_views(args.views)
    if args.fusion_iters is not None:
        cfg.fusion_iters = args.fusion_iters
    if args.command == "expand":
        ex = cfg.expand
        if args.mode:
            ex = replace(ex, mode=args.mode)
        if args.threshold is not None:
            ex = replace(ex, threshold=args.threshold, top_n=None)
        if args.top_n is not None:
            ex = replace(ex, top_n=args.top_n, threshold=None)
        if args.seeds:
            ex = replace(ex, seeds=args.seeds)
        cfg.expand = ex
    cfg = with_seed(cfg, args.seed)
    _validate(cfg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run = Run(Path(args.out), cfg)
        t0 = time.perf_counter()
        fn = STAGES[args.command]
        kwargs = {"parallel": args.parallel_views} if args.command in ("train", "gridsearch") else {}
        res = fn(run, **kwargs)
        write_manifest(run, args.command, argv, t0, res["inputs"], res["outputs"], res.get("extra"))
    except (CliError, pl.StageError, sg.GenError, ev.EvaluationError, ValueError,
            KeyError, FileNotFoundError) as exc:
        print(f"eclm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
