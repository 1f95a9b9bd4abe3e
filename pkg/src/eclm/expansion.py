"""Seed-list expansion over fused embeddings.

Candidates are scored by cosine similarity, either against the seed
centroid or as the maximum over individual seeds, then filtered by a
threshold or cut to the top n. Ties are always broken by ascending user
label.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import _kernels as K

log = logging.getLogger(__name__)

MODES = ("centroid", "max-sim")


@dataclass
class SeedList:
    users: list[str]
    campaign: str = ""

    def __post_init__(self):
        if not self.users:
            raise ValueError("seed list is empty")
        if len(set(self.users)) != len(self.users):
            raise ValueError("seed list contains duplicates")


@dataclass
class ExpansionResult:
    candidates: list[tuple[str, float]]
    mode: str
    threshold: float | None = None
    top_n: int | None = None

    @property
    def users(self) -> list[str]:
        return [u for u, _ in self.candidates]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("rank,user,score\n")
            for i, (u, s) in enumerate(self.candidates, start=1):
                fh.write(f"{i},{u},{s:.6f}\n")


def read_seed_list(path, campaign: str = "") -> SeedList:
    with open(path, encoding="utf-8") as fh:
        users = [line.strip() for line in fh if line.strip()]
    return SeedList(users, campaign)


def normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    n = np.linalg.norm(X, axis=-1, keepdims=True)
    return np.divide(X, n, out=np.zeros_like(X), where=n > 0)


def _rank(users: list[str], scores: np.ndarray) -> list[tuple[str, float]]:
    order = sorted(range(len(users)), key=lambda i: (-scores[i], users[i]))
    return [(users[i], float(scores[i])) for i in order]


def score_candidates(seeds, candidates, embeddings: dict[str, np.ndarray],
                     mode: str = "centroid") -> list[tuple[str, float]]:
    """Cosine scores of candidates against the seed set, best first.

    ``embeddings`` maps user label to fused vector. Seeds are removed from
    the candidates. Raises KeyError for seeds without an embedding.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    seed_users = seeds.users if isinstance(seeds, SeedList) else list(seeds)
    seed_set = set(seed_users)
    missing = [u for u in seed_users if u not in embeddings]
    if missing:
        raise KeyError(f"seeds without embeddings: {missing[:5]}")
    cands = sorted(u for u in set(candidates) if u not in seed_set)
    if not cands:
        log.warning("no candidates left after removing seeds")
        return []
    S = normalize_rows(np.array([embeddings[u] for u in seed_users]))
    C = normalize_rows(np.array([embeddings[u] for u in cands]))
    if mode == "centroid":
        centroid = normalize_rows(S.mean(axis=0))
        scores = C @ centroid
    else:
        scores = (C @ S.T).max(axis=1)
    return _rank(cands, np.clip(scores, -1.0, 1.0))


def check_threshold(T: float) -> float:
    T = float(T)
    if not -1.0 <= T <= 1.0:
        raise ValueError(f"threshold {T} outside [-1, 1]")
    return T


def expand_threshold(scored: list[tuple[str, float]], T: float, mode: str = "centroid") -> ExpansionResult:
    T = check_threshold(T)
    return ExpansionResult([(u, s) for u, s in scored if s >= T], mode, threshold=T)


def expand_top_n(scored: list[tuple[str, float]], n: int, mode: str = "centroid") -> ExpansionResult:
    if n < 1:
        raise ValueError("n must be >= 1")
    ranked = sorted(scored, key=lambda x: (-x[1], x[0]))
    return ExpansionResult(ranked[:n], mode, top_n=n)


# ----------------------------------------------------------------------
# coarse partition index


@dataclass
class PartitionIndex:
    """Inverted-file index: k-means partitions over unit-normalised vectors."""

    vectors: np.ndarray          # (N, d) unit rows
    centroids: np.ndarray        # (K, d) unit rows
    assignment: np.ndarray       # (N,)
    lists: list[np.ndarray] = field(repr=False)
    n_probe: int = 1

    @property
    def n_partitions(self) -> int:
        return len(self.centroids)

    def query(self, vector: np.ndarray, k: int, n_probe: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Ids and cosine scores of up to k nearest stored vectors.

        Ranking is by descending score, ties by ascending id.
        """
        p = self.n_probe if n_probe is None else n_probe
        p = max(1, min(p, self.n_partitions))
        q = normalize_rows(vector)
        cscore = self.centroids @ q
        probe = np.lexsort((np.arange(len(cscore)), -cscore))[:p]
        ids = np.sort(np.concatenate([self.lists[c] for c in probe]))
        return _top_k(self.vectors, ids, q, k)


def _top_k(X: np.ndarray, ids: np.ndarray, q: np.ndarray, k: int):
    scores = K.row_dots(X, ids, q)
    order = np.lexsort((ids, -scores))[:k]
    return ids[order], scores[order]


def brute_force_query(vectors: np.ndarray, vector: np.ndarray, k: int):
    """Exact cosine top-k using the same scoring path as the index."""
    X = normalize_rows(vectors)
    return _top_k(X, np.arange(len(X)), normalize_rows(vector), k)


def build_partition_index(embeddings: np.ndarray, n_partitions: int | None = None,
                          n_probe: int | None = None, seed: int = 0) -> PartitionIndex:
    X = normalize_rows(embeddings)
    N = len(X)
    if N == 0:
        raise ValueError("cannot index an empty embedding set")
    Kp = n_partitions or math.ceil(math.sqrt(N))
    Kp = max(1, min(Kp, N))
    if Kp == 1:
        cent = normalize_rows(X.mean(axis=0, keepdims=True))
    else:
        cent, _ = kmeans2(X, Kp, minit="++", seed=np.random.default_rng(seed), iter=20)
        cent = normalize_rows(cent)
    assign = np.argmax(X @ cent.T, axis=1)
    lists = [np.nonzero(assign == c)[0] for c in range(len(cent))]
    probe = n_probe or math.ceil(len(cent) / 4)
    return PartitionIndex(X, cent, assign, lists, probe)
