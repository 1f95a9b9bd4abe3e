"""Cosine-weighted fusion of per-view user embeddings.

Each present view gets a weight proportional to its cosine with the
average of the user's present views; weights are normalised to sum to one
and the fused vector is the weighted sum. Missing views get weight zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trainer import VIEWS, format_vector, read_embeddings, write_embeddings

DEGENERATE_EPS = 1e-9


@dataclass
class ViewSet:
    user: str
    views: list  # one entry per slot in VIEWS, vector or None

    def __post_init__(self):
        if len(self.views) != len(VIEWS):
            raise ValueError(f"expected {len(VIEWS)} view slots, got {len(self.views)}")
        present = [np.asarray(v, dtype=float) for v in self.views if v is not None]
        if not present:
            raise ValueError(f"{self.user}: no view present")
        if len({v.shape for v in present}) != 1:
            raise ValueError(f"{self.user}: views have different dimensions")

    @classmethod
    def from_dict(cls, user: str, views: dict) -> "ViewSet":
        return cls(user, [views.get(v) for v in VIEWS])

    @property
    def mask(self) -> np.ndarray:
        return np.array([v is not None for v in self.views])

    def present(self) -> np.ndarray:
        return np.array([np.asarray(v, dtype=float) for v in self.views if v is not None])


@dataclass
class FusedEmbedding:
    user: str
    vector: np.ndarray
    weights: np.ndarray  # per slot, zero where missing
    mask: np.ndarray
    degenerate: bool = False


def _cosines(vectors: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Cosine of each row with ``ref``; zero vectors have cosine 0."""
    norms = np.linalg.norm(vectors, axis=1) * np.linalg.norm(ref)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, (vectors @ ref) / safe, 0.0)


def mean_view(views: ViewSet) -> np.ndarray:
    return views.present().mean(axis=0)


def view_weights(views: ViewSet, iters: int = 1) -> tuple[np.ndarray, bool]:
    """Weights over present views (in slot order) and a degenerate flag.

    ``iters > 1`` recomputes the reference as the weighted average and
    repeats; the default uses the plain mean.
    """
    X = views.present()
    V = len(X)
    w = np.full(V, 1.0 / V)
    degenerate = False
    ref = X.mean(axis=0)
    for it in range(max(1, iters)):
        if it > 0:
            ref = (w[:, None] * X).sum(axis=0) / V
        cos = _cosines(X, ref)
        denom = cos.sum()
        if abs(denom) <= DEGENERATE_EPS:
            w, degenerate = np.full(V, 1.0 / V), True
            break
        w = cos / denom
    return w, degenerate


def fuse(views: ViewSet, iters: int = 1) -> FusedEmbedding:
    X = views.present()
    mask = views.mask
    if (X == X[0]).all():
        # every present view identical: uniform weights, exact copy
        w, degenerate, vec = np.full(len(X), 1.0 / len(X)), False, X[0].copy()
    else:
        w, degenerate = view_weights(views, iters)
        vec = w @ X
    full = np.zeros(len(VIEWS))
    full[mask] = w
    return FusedEmbedding(views.user, vec, full, mask, degenerate)


def fuse_all(users: list[str], tables: dict[str, tuple[list[str], np.ndarray]],
             iters: int = 1) -> list[FusedEmbedding]:
    """Fuse every user that has at least one view among ``tables``.

    ``tables`` maps a view name to (labels, matrix) of that view's users.
    """
    dims = {m.shape[1] for _, m in tables.values() if len(m)}
    if len(dims) > 1:
        raise ValueError(f"views trained with different dimensions: {sorted(dims)}")
    lookups = {v: (dict(zip(labels, range(len(labels)))), m) for v, (labels, m) in tables.items()}
    out = []
    for u in users:
        vecs = {}
        for v, (idx, m) in lookups.items():
            i = idx.get(u)
            if i is not None:
                vecs[v] = m[i]
        if vecs:
            out.append(fuse(ViewSet.from_dict(u, vecs), iters))
    return out


def write_fused(fused: list[FusedEmbedding], emb_path, weights_path) -> None:
    write_embeddings(emb_path, [f.user for f in fused],
                     np.array([f.vector for f in fused]) if fused else np.zeros((0, 0)))
    with open(weights_path, "w", encoding="utf-8", newline="\n") as fh:
        for f in fused:
            mask = "".join("1" if m else "0" for m in f.mask)
            fh.write(f"{f.user}\t{format_vector(f.weights)}\t{mask}\n")


def read_weights(path) -> dict[str, tuple[np.ndarray, str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                u, w, mask = line.rstrip("\n").split("\t")
                out[u] = (np.array([float(x) for x in w.split(",")]), mask)
    return out


def read_fused(path) -> tuple[list[str], np.ndarray]:
    return read_embeddings(Path(path))
