"""Attention building blocks for windowed sequence models.

Provides the mask constructors (index-distance self mask, moving-window mask),
sinusoidal positional encoding, multi-head scaled dot-product attention, the
max-pooled window prompts, windowing cross-attention from prompts to steps,
and the learned window weighing that collapses window embeddings into one
sequence embedding.

Padding is always a suffix: a boolean ``real`` vector marks the leading real
steps, and every constructor here guarantees padded steps get exactly zero
attention weight and contribute nothing to prompts or window embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """Invalid architectural or windowing configuration."""


@dataclass(frozen=True)
class WindowSpec:
    """Windowing geometry: range ``r``, stride ``s``, self-attention range ``r_self``."""

    r: int
    s: int
    r_self: int = 0

    def __post_init__(self):
        if self.r < 1 or self.s < 1 or self.r_self < 0:
            raise ConfigError(
                f"need r >= 1, s >= 1, r_self >= 0, got r={self.r} s={self.s} r_self={self.r_self}"
            )

    def num_windows(self, length: int) -> int:
        """Window count covering every step at least once: ceil(length / s)."""
        return -(-length // self.s)


@lru_cache(maxsize=1024)
def build_self_mask(length: int, r_self: int) -> np.ndarray:
    """Boolean (L, L) mask, true where |i - j| <= r_self."""
    if length < 1:
        raise ConfigError(f"length must be >= 1, got {length}")
    idx = np.arange(length)
    mask = np.abs(idx[:, None] - idx[None, :]) <= r_self
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=1024)
def _window_mask(length: int, r: int, s: int) -> np.ndarray:
    n_win = -(-length // s)
    j = np.arange(length)[None, :]
    starts = s * np.arange(n_win)[:, None]
    mask = (starts <= j) & (j < starts + r)
    mask.setflags(write=False)
    return mask


def build_window_mask(length: int, spec: WindowSpec) -> np.ndarray:
    """Boolean (L_w, L) mask; row i is true exactly on [s*i, min(s*i + r, L))."""
    if length < 1:
        raise ConfigError(f"length must be >= 1, got {length}")
    return _window_mask(length, spec.r, spec.s)


@lru_cache(maxsize=1024)
def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position matrix (L, D): sin on even dims, cos on odd dims."""
    if dim % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    pe.setflags(write=False)
    return pe


@dataclass
class MultiHeadParams:
    """Per-head query/key/value projections plus the shared output projection."""

    heads: int
    wq: list
    bq: list
    wk: list
    bk: list
    wv: list
    bv: list
    wo: Tensor
    bo: Tensor

    def named(self):
        for h in range(self.heads):
            yield self.wq[h].name, self.wq[h]
            yield self.bq[h].name, self.bq[h]
            yield self.wk[h].name, self.wk[h]
            yield self.bk[h].name, self.bk[h]
            yield self.wv[h].name, self.wv[h]
            yield self.bv[h].name, self.bv[h]
        yield self.wo.name, self.wo
        yield self.bo.name, self.bo


def init_multihead(dim: int, heads: int, rng: np.random.Generator, prefix: str) -> MultiHeadParams:
    if heads < 1 or dim % heads != 0:
        raise ConfigError(f"head count {heads} must divide model dimension {dim}")
    dh = dim // heads
    scale = 1.0 / math.sqrt(dim)

    def w(name, shape):
        return Tensor(rng.normal(0.0, scale, shape), requires_grad=True, name=f"{prefix}.{name}")

    def b(name, size):
        return Tensor(np.zeros(size), requires_grad=True, name=f"{prefix}.{name}")

    return MultiHeadParams(
        heads=heads,
        wq=[w(f"head{h}.wq", (dim, dh)) for h in range(heads)],
        bq=[b(f"head{h}.bq", dh) for h in range(heads)],
        wk=[w(f"head{h}.wk", (dim, dh)) for h in range(heads)],
        bk=[b(f"head{h}.bk", dh) for h in range(heads)],
        wv=[w(f"head{h}.wv", (dim, dh)) for h in range(heads)],
        bv=[b(f"head{h}.bv", dh) for h in range(heads)],
        wo=w("out.w", (dim, dim)),
        bo=b("out.b", dim),
    )


def _multi_head_attention(queries: Tensor, keys_values: Tensor, params: MultiHeadParams,
                          mask: np.ndarray):
    """Scaled dot-product attention per head under ``mask``; heads concatenated
    and output-projected. Returns (output, head-averaged attention matrix)."""
    dim = keys_values.shape[1]
    dh = dim // params.heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    att_acc = np.zeros(mask.shape)
    for h in range(params.heads):
        q = T.matmul(queries, params.wq[h]) + params.bq[h]
        k = T.matmul(keys_values, params.wk[h]) + params.bk[h]
        v = T.matmul(keys_values, params.wv[h]) + params.bv[h]
        att = T.masked_softmax(T.matmul(q, T.transpose(k)) * scale, mask)
        outs.append(T.matmul(att, v))
        att_acc += att.data
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    out = T.matmul(merged, params.wo) + params.bo
    return out, att_acc / params.heads


def self_attention(x: Tensor, params: MultiHeadParams, mask: np.ndarray,
                   real: np.ndarray) -> Tensor:
    """Masked multi-head self-attention over the steps of ``x`` (L, D).

    The range mask and the padding mask are conjoined, so padded steps neither
    attend nor get attended to; fully padded query rows come out all zero.
    """
    if mask.shape != (x.shape[0], x.shape[0]):
        raise ShapeError(f"self mask {mask.shape} does not fit input {x.shape}")
    combined = mask & real[None, :] & real[:, None]
    out, _ = _multi_head_attention(x, x, params, combined)
    return out


def self_attention_banded(x: Tensor, params: MultiHeadParams, radius: int,
                          real: np.ndarray) -> Tensor:
    """Range-masked self-attention on the band layout.

    Same result as ``self_attention`` with the |i-j| <= radius mask, but the
    softmax work scales with L*radius; the win is large whenever the range is
    small next to the sequence length.
    """
    dim = x.shape[1]
    dh = dim // params.heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(params.heads):
        q = T.matmul(x, params.wq[h]) + params.bq[h]
        k = T.matmul(x, params.wk[h]) + params.bk[h]
        v = T.matmul(x, params.wv[h]) + params.bv[h]
        outs.append(T.banded_attention(q, k, v, radius, real, scale))
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    return T.matmul(merged, params.wo) + params.bo


def window_prompts(x: Tensor, spec: WindowSpec, real: np.ndarray):
    """Per-window query prompts: the per-dimension max of each window's real steps.

    Returns (prompts (L_w, D), alive (L_w,)). Windows containing no real step
    get a zero prompt and alive=False.
    """
    length = x.shape[0]
    n_real = int(real.sum())
    n_win = spec.num_windows(length)
    spans = []
    alive = np.zeros(n_win, dtype=bool)
    for i in range(n_win):
        a = spec.s * i
        b = min(a + spec.r, n_real)
        if a < b:
            spans.append((a, b))
            alive[i] = True
        else:
            spans.append(None)
    return T.windowed_max(x, spans), alive


def windowing_attention(x: Tensor, prompts: Tensor, params: MultiHeadParams,
                        wmask: np.ndarray, real: np.ndarray):
    """Cross-attention from window prompts to the steps inside each window.

    Each alive window's attention row is a softmax over its in-window real
    steps (sums to 1); padded steps get exactly zero weight. Returns
    (window embeddings (L_w, D), attention matrix (L_w, L)) — the matrix is
    averaged over heads and kept for interpretability export.
    """
    if prompts.shape[0] != wmask.shape[0]:
        raise ShapeError(f"{prompts.shape[0]} prompts for {wmask.shape[0]} mask rows")
    combined = wmask & real[None, :]
    return _multi_head_attention(prompts, x, params, combined)


def window_weighing(xw: Tensor, w_w: Tensor, alive: np.ndarray):
    """Weighted sum of window embeddings with learned scalar saliencies.

    weight_i = xw[i] . w_w, zeroed for windows without real steps; the output
    is sum_i weight_i * xw[i] as a (1, D) row. Returns (embedding, weights).
    """
    raw = T.matmul(xw, w_w)
    gate = Tensor(alive.astype(np.float64).reshape(-1, 1))
    weights = T.mul(raw, gate)
    out = T.matmul(T.transpose(weights), xw)
    return out, weights.data.ravel().copy()
