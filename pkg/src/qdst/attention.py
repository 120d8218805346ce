"""Multi-head scaled dot-product attention restricted to a sparse pattern.

The sparse kernel never builds an ``n x n`` score matrix. Work is split
into three kinds of unit:

* a dense strip for every global row (it sees every non-PAD column),
* band blocks of ``block_size`` ordinary rows, each scoring a contiguous
  column window plus the global columns.

Inside a band block, global columns are masked out of the window and
scored once through the global-column strip, so every allowed ``(i, j)``
pair contributes exactly once. A FULL pattern takes the textbook dense
path.

Cost model constants (multiply-adds per token per layer):

* ``FEEDFORWARD_MACS = 12``: four ``dim x dim`` projections (q, k, v and
  the output mix) plus the ``dim -> 4 dim -> dim`` position-wise network.
* ``ATTENTION_MACS = 2``: one multiply-add for the ``q . k`` score and one
  for the value mix, per allowed pair and per model dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import InternalInvariantViolation, InvalidInput, InvalidState
from .pattern import BlockSparsePattern

FEEDFORWARD_MACS = 12
ATTENTION_MACS = 2
DEFAULT_BLOCK_SIZE = 64
ORACLE_MAX_N = 2048


@dataclass(frozen=True)
class HeadConfig:
    num_heads: int
    head_dim: int

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise InvalidInput("num_heads and head_dim must be positive")

    @property
    def dim(self) -> int:
        return self.num_heads * self.head_dim

    @classmethod
    def for_dim(cls, dim: int, num_heads: int) -> "HeadConfig":
        if dim % num_heads:
            raise InvalidInput(f"dim={dim} is not divisible by num_heads={num_heads}")
        return cls(num_heads, dim // num_heads)


@dataclass
class AttentionWeights:
    """Projection matrices, stored PyTorch-style as ``(out, in)``."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_f: np.ndarray

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    def check(self, dim: int):
        for name in ("w_q", "w_k", "w_v", "w_f"):
            w = getattr(self, name)
            if w.shape != (dim, dim):
                raise InvalidInput(f"{name} has shape {w.shape}, expected {(dim, dim)}")

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, scale: float = None, dtype=np.float64):
        scale = 1.0 / np.sqrt(dim) if scale is None else scale
        return cls(*(rng.normal(0.0, scale, size=(dim, dim)).astype(dtype) for _ in range(4)))


@dataclass
class AttentionGrads:
    d_h: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_f: np.ndarray


@dataclass
class AttentionTrace:
    """Per-head attention rows, stored in CSR form over allowed columns.

    ``weights[h, indptr[i]:indptr[i + 1]]`` are head ``h``'s probabilities
    for row ``i`` over columns ``indices[indptr[i]:indptr[i + 1]]``
    (ascending). PAD rows are empty.
    """

    pattern: BlockSparsePattern
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @property
    def num_heads(self) -> int:
        return self.weights.shape[0]

    @property
    def n(self) -> int:
        return self.pattern.n

    def row(self, i: int):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.indices[lo:hi], self.weights[:, lo:hi]

    def dense(self) -> np.ndarray:
        out = np.zeros((self.num_heads, self.n, self.n), dtype=self.weights.dtype)
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        out[:, rows, self.indices] = self.weights
        return out


@dataclass
class CostEstimate:
    feedforward_flops: int
    attention_flops: int

    @property
    def total(self) -> int:
        return self.feedforward_flops + self.attention_flops


@dataclass
class _Unit:
    rows: np.ndarray
    col_lo: int  # contiguous column window [col_lo, col_hi)
    col_hi: int
    window_mask: Optional[np.ndarray]  # (rows, window) bool, None = all allowed
    global_cols: np.ndarray  # extra columns scored after the window
    probs: Optional[np.ndarray] = None  # (h, rows, window + len(global_cols))


@dataclass
class ForwardCache:
    """Forward state kept for :func:`sparse_attention_backward`.

    Pass an empty instance to the forward call; it is filled in place.
    ``peak_score_elements`` counts the largest number of score/probability
    entries held at once during the forward pass.
    """

    h: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    context: Optional[np.ndarray] = None
    weights: Optional[AttentionWeights] = None
    heads: Optional[HeadConfig] = None
    units: List[_Unit] = field(default_factory=list)
    peak_score_elements: int = 0

    @property
    def ready(self) -> bool:
        return self.q is not None


def _split_heads(x: np.ndarray, heads: HeadConfig) -> np.ndarray:
    n = x.shape[0]
    return x.reshape(n, heads.num_heads, heads.head_dim).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def project_qkv(h: np.ndarray, weights: AttentionWeights, heads: HeadConfig):
    """Return ``(Q, K, V)``, each shaped ``(num_heads, n, head_dim)``."""
    if h.ndim != 2 or h.shape[1] != heads.dim:
        raise InvalidInput(f"hidden states have shape {h.shape}, expected (n, {heads.dim})")
    weights.check(heads.dim)
    # one fused product instead of three
    w = np.concatenate([weights.w_q, weights.w_k, weights.w_v])
    qkv = (h @ w.T).reshape(h.shape[0], 3, heads.num_heads, heads.head_dim).transpose(1, 2, 0, 3)
    return qkv[0], qkv[1], qkv[2]


def masked_softmax_row(scores, allowed) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    allowed = np.asarray(sorted(allowed), dtype=np.int64)
    if allowed.size == 0:
        raise InternalInvariantViolation("softmax row has no allowed entries")
    out = np.zeros_like(scores)
    sub = scores[allowed]
    e = np.exp(sub - sub.max())
    out[allowed] = e / e.sum()
    return out


def _softmax_where(scores: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    """Row softmax over the last axis; masked-out entries become exactly 0."""
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def _plan_units(pattern: BlockSparsePattern, block_size: int) -> List[_Unit]:
    nv = pattern.n_valid
    if nv == 0:
        return []
    if pattern.full:
        return [_Unit(np.arange(nv), 0, nv, None, np.empty(0, dtype=np.int64))]

    is_grow = pattern.row_mask()
    is_gcol = pattern.col_mask()
    gcols = pattern.global_cols
    hw = pattern.half_window
    units = []
    if len(pattern.global_rows):
        units.append(_Unit(pattern.global_rows, 0, nv, None, np.empty(0, dtype=np.int64)))
    for b0 in range(0, nv, block_size):
        block = np.arange(b0, min(b0 + block_size, nv))
        rows = block[~is_grow[block]]
        if rows.size == 0:
            continue
        if hw is None:
            lo = hi = 0
            wmask = np.zeros((rows.size, 0), dtype=bool)
        else:
            lo, hi = max(0, rows[0] - hw), min(nv, rows[-1] + hw + 1)
            cols = np.arange(lo, hi)
            wmask = (np.abs(rows[:, None] - cols[None, :]) <= hw) & ~is_gcol[cols][None, :]
        if not wmask.any(axis=1).all() and gcols.size == 0:
            raise InternalInvariantViolation("pattern row with no allowed column")
        units.append(_Unit(rows, lo, hi, wmask, gcols))
    return units


def sparse_attention_forward(
    h: np.ndarray,
    weights: AttentionWeights,
    heads: HeadConfig,
    pattern: BlockSparsePattern,
    record_trace: bool = False,
    cache: Optional[ForwardCache] = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
):
    """Attention sublayer output ``W_f . concat_heads(softmax(QK^T/sqrt(d)) V)``.

    Returns ``(output, trace)``; ``trace`` is None unless requested. PAD
    rows produce zero output.
    """
    n = h.shape[0]
    if pattern.n != n:
        raise InvalidInput(f"pattern covers {pattern.n} positions but the sequence has {n}")
    if not np.all(np.isfinite(h)):
        raise InvalidInput("hidden states contain non-finite values")
    q, k, v = project_qkv(h, weights, heads)
    q = q * (1.0 / math.sqrt(heads.head_dim))
    ctx = np.zeros_like(v)

    units = _plan_units(pattern, block_size)
    keep = cache is not None or record_trace
    held = 0
    peak = 0
    for u in units:
        kw = k[:, u.col_lo:u.col_hi]
        qr = q[:, u.rows]
        s = qr @ kw.transpose(0, 2, 1)
        mask = u.window_mask
        if u.global_cols.size:
            s = np.concatenate([s, qr @ k[:, u.global_cols].transpose(0, 2, 1)], axis=-1)
            mask = np.concatenate([mask, np.ones((len(u.rows), u.global_cols.size), dtype=bool)], axis=1)
        p = _softmax_where(s, mask)
        width = u.col_hi - u.col_lo
        out = p[..., :width] @ v[:, u.col_lo:u.col_hi]
        if u.global_cols.size:
            out += p[..., width:] @ v[:, u.global_cols]
        ctx[:, u.rows] = out
        peak = max(peak, held + p.size)
        if keep:
            u.probs = p
            held += p.size

    merged = _merge_heads(ctx)
    output = merged @ weights.w_f.T

    if cache is not None:
        cache.h, cache.q, cache.k, cache.v = h, q, k, v
        cache.context = merged
        cache.weights, cache.heads = weights, heads
        cache.units = units
        cache.peak_score_elements = peak
    trace = _build_trace(pattern, units, heads.num_heads, h.dtype) if record_trace else None
    return output, trace


def _build_trace(pattern, units, num_heads, dtype) -> AttentionTrace:
    n = pattern.n
    row_cols = [None] * n
    row_w = [None] * n
    for u in units:
        window_cols = np.arange(u.col_lo, u.col_hi)
        for r_idx, r in enumerate(u.rows):
            if u.window_mask is None:
                cols, w = window_cols, u.probs[:, r_idx]
            else:
                sel = u.window_mask[r_idx]
                cols = np.concatenate([window_cols[sel], u.global_cols])
                w = np.concatenate([u.probs[:, r_idx, : len(window_cols)][:, sel], u.probs[:, r_idx, len(window_cols):]], axis=1)
                order = np.argsort(cols, kind="stable")
                cols, w = cols[order], w[:, order]
            row_cols[r] = cols
            row_w[r] = w
    counts = np.array([0 if c is None else len(c) for c in row_cols], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    present = [i for i in range(n) if row_cols[i] is not None]
    indices = np.concatenate([row_cols[i] for i in present]) if present else np.empty(0, dtype=np.int64)
    weights = (
        np.concatenate([row_w[i] for i in present], axis=1) if present else np.empty((num_heads, 0), dtype=dtype)
    )
    return AttentionTrace(pattern, indptr, indices.astype(np.int64), weights)


def sparse_attention_backward(d_out: np.ndarray, cache: Optional[ForwardCache]) -> AttentionGrads:
    """Reverse-mode gradients of the attention sublayer."""
    if cache is None or not cache.ready:
        raise InvalidState("backward called without a populated forward cache")
    weights, heads = cache.weights, cache.heads
    q, k, v = cache.q, cache.k, cache.v

    g_wf = d_out.T @ cache.context
    d_ctx = _split_heads(d_out @ weights.w_f, heads)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for u in cache.units:
        p = u.probs
        width = u.col_hi - u.col_lo
        dc = d_ctx[:, u.rows]
        v_win = v[:, u.col_lo:u.col_hi]
        k_win = k[:, u.col_lo:u.col_hi]
        dp = dc @ v_win.transpose(0, 2, 1)
        dv[:, u.col_lo:u.col_hi] += p[..., :width].transpose(0, 2, 1) @ dc
        if u.global_cols.size:
            vg = v[:, u.global_cols]
            dp = np.concatenate([dp, dc @ vg.transpose(0, 2, 1)], axis=-1)
            dv[:, u.global_cols] += p[..., width:].transpose(0, 2, 1) @ dc
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        qr = q[:, u.rows]
        dq[:, u.rows] += ds[..., :width] @ k_win
        dk[:, u.col_lo:u.col_hi] += ds[..., :width].transpose(0, 2, 1) @ qr
        if u.global_cols.size:
            dq[:, u.rows] += ds[..., width:] @ k[:, u.global_cols]
            dk[:, u.global_cols] += ds[..., width:].transpose(0, 2, 1) @ qr

    dq *= 1.0 / math.sqrt(heads.head_dim)
    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=1)
    w_qkv = np.concatenate([weights.w_q, weights.w_k, weights.w_v])
    g_qkv = dqkv.T @ cache.h
    dim = heads.dim
    return AttentionGrads(
        d_h=dqkv @ w_qkv,
        w_q=g_qkv[:dim],
        w_k=g_qkv[dim : 2 * dim],
        w_v=g_qkv[2 * dim :],
        w_f=g_wf,
    )


def dense_reference_attention(
    h: np.ndarray,
    weights: AttentionWeights,
    heads: HeadConfig,
    dense_mask: np.ndarray,
    mask_mode: str = "pre",
    allow_empty_rows: bool = False,
    max_n: int = ORACLE_MAX_N,
) -> np.ndarray:
    """Textbook attention over an explicit ``n x n`` 0/1 mask.

    ``mask_mode="pre"`` applies the mask as ``-inf`` before the softmax.
    ``"post"`` is a diagnostic: softmax over all columns, then multiply by
    the mask, which leaves rows un-normalized. With ``allow_empty_rows``,
    rows without any allowed column (PAD rows) yield zeros.
    """
    n = h.shape[0]
    if n > max_n:
        raise InvalidInput(f"oracle is capped at n={max_n}")
    mask = np.asarray(dense_mask).astype(bool)
    if mask.shape != (n, n):
        raise InvalidInput(f"mask shape {mask.shape} does not match n={n}")
    empty = ~mask.any(axis=1)
    if empty.any() and not allow_empty_rows:
        raise InvalidInput(f"mask row {int(np.flatnonzero(empty)[0])} has no allowed column")
    q, k, v = project_qkv(h, weights, heads)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(heads.head_dim)
    if mask_mode == "pre":
        scores = np.where(mask[None], scores, -np.inf)
        scores[:, empty, :] = 0.0
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[:, empty, :] = 0.0
    elif mask_mode == "post":
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs *= mask[None]
    else:
        raise InvalidInput(f"unknown mask_mode {mask_mode!r}")
    return _merge_heads(probs @ v) @ weights.w_f.T


def flop_estimate(n: int, dim: int, w: int, q_len: int, num_sentences: int, full: bool = False) -> CostEstimate:
    """Multiply-add counts for one encoder layer.

    The sparse attention term uses ``w + q_len + num_sentences + 1``
    attended columns per row, clamped at ``n`` since sparse attention can
    never cost more than dense.
    """
    if min(n, dim, w, q_len, num_sentences) < 0:
        raise InvalidInput("counts must be non-negative")
    span = n if full else min(n, w + q_len + num_sentences + 1)
    return CostEstimate(
        feedforward_flops=FEEDFORWARD_MACS * dim * dim * n,
        attention_flops=ATTENTION_MACS * n * span * dim,
    )
