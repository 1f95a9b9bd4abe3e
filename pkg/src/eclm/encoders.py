"""Literal and loyalty encoders with hand-derived gradients.

``ngram_encode`` maps a character sequence to a vector by summing, for
each n-gram order 1..N, the mean over windows of the summed character
vectors. Because the map is linear in the character table it reduces to a
fixed coefficient per character position, see ``ngram_coefficients``.

The loyalty encoder stacks a relation vector and a value vector into a
2 x d matrix, applies full-height convolution filters with tanh, max-pools
each filter over positions and projects back to d dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_NGRAM = 3
DEFAULT_FILTERS = 8
DEFAULT_WIDTH = 2


def ngram_coefficients(k: int, N: int) -> np.ndarray:
    """Weight of each of the k positions in the n-gram composition."""
    if k < 1:
        raise ValueError("literal must contain at least one character")
    if N < 1:
        raise ValueError("n-gram order must be >= 1")
    coef = np.zeros(k)
    for n in range(1, min(N, k) + 1):
        n_windows = k - n + 1
        # position j (0-based) is covered by windows starting in [j-n+1, j]
        for j in range(k):
            lo = max(0, j - n + 1)
            hi = min(j, n_windows - 1)
            coef[j] += (hi - lo + 1) / n_windows
    return coef


def ngram_encode(chars, table: np.ndarray, N: int = DEFAULT_NGRAM) -> np.ndarray:
    chars = np.asarray(chars, dtype=np.int64)
    coef = ngram_coefficients(len(chars), N)
    return coef @ table[chars]


def ngram_encode_naive(chars, table: np.ndarray, N: int = DEFAULT_NGRAM) -> np.ndarray:
    """Window-by-window evaluation; used as a cross-check of the coefficients."""
    chars = np.asarray(chars, dtype=np.int64)
    k = len(chars)
    if k < 1:
        raise ValueError("literal must contain at least one character")
    out = np.zeros(table.shape[1])
    for n in range(1, N + 1):
        if n > k:
            continue
        acc = np.zeros(table.shape[1])
        for i in range(k - n + 1):
            acc += table[chars[i:i + n]].sum(axis=0)
        out += acc / (k - n + 1)
    return out


def ngram_encode_grad(chars, table: np.ndarray, N: int, upstream: np.ndarray) -> dict[int, np.ndarray]:
    """Gradient of <phi, upstream> as {char id: row gradient}."""
    chars = np.asarray(chars, dtype=np.int64)
    coef = ngram_coefficients(len(chars), N)
    grad: dict[int, np.ndarray] = {}
    for c, w in zip(chars.tolist(), coef):
        if c in grad:
            grad[c] = grad[c] + w * upstream
        else:
            grad[c] = w * upstream
    return grad


@dataclass
class CnnParams:
    filters: np.ndarray      # (F, 2, w)
    filter_bias: np.ndarray  # (F,)
    proj: np.ndarray         # (d, F)
    proj_bias: np.ndarray    # (d,)

    def __post_init__(self):
        F, rows, w = self.filters.shape
        d = self.proj.shape[0]
        if rows != 2:
            raise ValueError("filters must span both input rows")
        if w > d:
            raise ValueError(f"filter width {w} exceeds embedding dimension {d}")
        if self.proj.shape != (d, F) or self.filter_bias.shape != (F,) or self.proj_bias.shape != (d,):
            raise ValueError("inconsistent CNN parameter shapes")

    @property
    def dim(self) -> int:
        return self.proj.shape[0]

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0]

    @property
    def width(self) -> int:
        return self.filters.shape[2]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, n_filters: int = DEFAULT_FILTERS,
             width: int = DEFAULT_WIDTH) -> "CnnParams":
        if width > d:
            raise ValueError(f"filter width {width} exceeds embedding dimension {d}")
        fan_in = 2 * width
        return cls(
            filters=rng.uniform(-1, 1, (n_filters, 2, width)) / np.sqrt(fan_in),
            filter_bias=np.zeros(n_filters),
            proj=rng.uniform(-1, 1, (d, n_filters)) / np.sqrt(n_filters),
            proj_bias=np.zeros(d),
        )

    @classmethod
    def zeros(cls, d: int, n_filters: int = DEFAULT_FILTERS, width: int = DEFAULT_WIDTH) -> "CnnParams":
        return cls(np.zeros((n_filters, 2, width)), np.zeros(n_filters),
                   np.zeros((d, n_filters)), np.zeros(d))

    def copy(self) -> "CnnParams":
        return CnnParams(self.filters.copy(), self.filter_bias.copy(),
                         self.proj.copy(), self.proj_bias.copy())

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.filters, self.filter_bias, self.proj, self.proj_bias


def _conv(x: np.ndarray, params: CnnParams) -> np.ndarray:
    """Pre-activation filter responses, shape (F, d - w + 1)."""
    w = params.width
    windows = np.lib.stride_tricks.sliding_window_view(x, w, axis=1)  # (2, P, w)
    return np.einsum("frw,rpw->fp", params.filters, windows) + params.filter_bias[:, None]


def cnn_forward(rel_emb: np.ndarray, val_emb: np.ndarray, params: CnnParams) -> np.ndarray:
    x = np.stack([rel_emb, val_emb])
    pooled = np.tanh(_conv(x, params).max(axis=1))
    return params.proj @ pooled + params.proj_bias


@dataclass
class CnnGrads:
    filters: np.ndarray
    filter_bias: np.ndarray
    proj: np.ndarray
    proj_bias: np.ndarray
    rel: np.ndarray
    val: np.ndarray


def cnn_backward(rel_emb: np.ndarray, val_emb: np.ndarray, params: CnnParams,
                 upstream: np.ndarray) -> CnnGrads:
    """Exact gradients of <cnn_forward(...), upstream>.

    Max-pool sends the gradient to the first position attaining the max
    pre-activation.
    """
    x = np.stack([rel_emb, val_emb])
    pre = _conv(x, params)
    arg = pre.argmax(axis=1)
    F, w = params.n_filters, params.width
    pooled = np.tanh(pre[np.arange(F), arg])

    d_proj = np.outer(upstream, pooled)
    d_pooled = params.proj.T @ upstream
    d_pre = d_pooled * (1.0 - pooled ** 2)
    d_filters = np.zeros_like(params.filters)
    dx = np.zeros_like(x)
    for f in range(F):
        p = arg[f]
        d_filters[f] = d_pre[f] * x[:, p:p + w]
        dx[:, p:p + w] += d_pre[f] * params.filters[f]
    return CnnGrads(d_filters, d_pre.copy(), d_proj, upstream.copy(), dx[0], dx[1])
