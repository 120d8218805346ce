"""Sequence layouts and query-directed sparse attention adjacencies.

A :class:`SequenceLayout` records the role of every position in the
``[CLS] query [SEP] ([SOS] sentence)*`` sequence. Attention adjacencies
are stored structurally as a :class:`BlockSparsePattern`: a diagonal band
plus sets of global rows and columns. Nothing here materializes an
``n x n`` matrix unless :meth:`BlockSparsePattern.dense` is called.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInput

# Reserved vocabulary ids. The pipeline's Vocabulary uses the same values.
PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
SOS_ID = 4


class TokenRole(enum.IntEnum):
    CLS = 0
    QUERY = 1
    SEP = 2
    SOS = 3
    DOC = 4
    PAD = 5


class Preset(str, enum.Enum):
    FULL = "full"
    LOCAL_ONLY = "local"
    LONGFORMER_QA = "longformer_qa"
    QDS_Q = "qds_q"
    QDS_S = "qds_s"
    QDS = "qds"

    @classmethod
    def parse(cls, value) -> "Preset":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"local_only": "local", "sparse_transformer": "local", "longformer": "longformer_qa"}
        key = aliases.get(key, key)
        for p in cls:
            if p.value == key or p.name.lower() == key:
                return p
        raise InvalidInput(f"unknown preset {value!r}; expected one of {[p.value for p in cls]}")


# (query_global, sentence_global, cls_global) for each preset
_PRESET_FLAGS = {
    Preset.FULL: (False, False, False),
    Preset.LOCAL_ONLY: (False, False, False),
    Preset.LONGFORMER_QA: (False, False, False),
    Preset.QDS_Q: (True, False, True),
    Preset.QDS_S: (False, True, True),
    Preset.QDS: (True, True, True),
}


@dataclass(frozen=True)
class SequenceLayout:
    roles: np.ndarray
    token_ids: np.ndarray
    query_span: range
    sentence_starts: tuple

    def __post_init__(self):
        roles = np.asarray(self.roles, dtype=np.int8)
        ids = np.asarray(self.token_ids, dtype=np.int64)
        roles.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "roles", roles)
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "sentence_starts", tuple(int(s) for s in self.sentence_starts))
        self._validate()

    def _validate(self):
        n = len(self.roles)
        if len(self.token_ids) != n:
            raise InvalidInput("roles and token_ids differ in length")
        if n < 3:
            raise InvalidInput(f"layout needs at least [CLS], one query token and [SEP]; got n={n}")
        roles = self.roles
        if roles[0] != TokenRole.CLS or np.count_nonzero(roles == TokenRole.CLS) != 1:
            raise InvalidInput("exactly one [CLS] is required, at position 0")
        q = self.query_span
        if q.start != 1 or len(q) < 1 or np.any(roles[q.start:q.stop] != TokenRole.QUERY):
            raise InvalidInput("query span must start at 1 and contain only QUERY tokens")
        if np.count_nonzero(roles == TokenRole.QUERY) != len(q):
            raise InvalidInput("QUERY tokens found outside the query span")
        if q.stop >= n or roles[q.stop] != TokenRole.SEP or np.count_nonzero(roles == TokenRole.SEP) != 1:
            raise InvalidInput("exactly one [SEP] is required, right after the query")
        sos = np.flatnonzero(roles == TokenRole.SOS)
        if tuple(sos.tolist()) != self.sentence_starts:
            raise InvalidInput("sentence_starts disagree with SOS roles")
        pad = np.flatnonzero(roles == TokenRole.PAD)
        if len(pad) and pad[0] != n - len(pad):
            raise InvalidInput("PAD tokens must form a contiguous suffix")
        n_valid = n - len(pad)
        for s in sos:
            if s + 1 >= n_valid or roles[s + 1] not in (TokenRole.DOC, TokenRole.SOS):
                raise InvalidInput(f"[SOS] at {s} is not followed by a sentence token")

    @property
    def n(self) -> int:
        return len(self.roles)

    @property
    def n_valid(self) -> int:
        """Number of non-PAD positions (they always form a prefix)."""
        return self.n - int(np.count_nonzero(self.roles == TokenRole.PAD))

    @property
    def query_positions(self) -> np.ndarray:
        return np.arange(self.query_span.start, self.query_span.stop)

    @property
    def num_sentences(self) -> int:
        return len(self.sentence_starts)

    def sentence_of(self, position: int) -> Optional[int]:
        """Index of the sentence containing ``position``, or None."""
        idx = int(np.searchsorted(self.sentence_starts, position, side="right")) - 1
        if idx < 0 or position >= self.n_valid:
            return None
        return idx


def build_layout(query_tokens: Sequence[int], doc_sentences: Sequence[Sequence[int]], max_len: int = 2048) -> SequenceLayout:
    """Concatenate ``[CLS] q [SEP]`` and ``[SOS]``-prefixed sentences.

    The tail of the document is cut to fit ``max_len``. The query prefix is
    never truncated, and a sentence cut down to its bare ``[SOS]`` is dropped
    entirely.
    """
    query = list(query_tokens)
    if not query:
        raise InvalidInput("query must contain at least one token")
    if max_len < len(query) + 2:
        raise InvalidInput(f"max_len={max_len} cannot hold [CLS] + {len(query)} query tokens + [SEP]")

    ids = [CLS_ID, *query, SEP_ID]
    roles = [TokenRole.CLS] + [TokenRole.QUERY] * len(query) + [TokenRole.SEP]
    for sent in doc_sentences:
        sent = list(sent)
        if not sent:
            raise InvalidInput("empty sentence in document")
        ids.append(SOS_ID)
        roles.append(TokenRole.SOS)
        ids.extend(sent)
        roles.extend([TokenRole.DOC] * len(sent))
        if len(ids) >= max_len:
            break
    ids = ids[:max_len]
    roles = roles[:max_len]
    if roles[-1] == TokenRole.SOS:
        ids.pop()
        roles.pop()

    starts = [i for i, r in enumerate(roles) if r == TokenRole.SOS]
    return SequenceLayout(np.array(roles), np.array(ids), range(1, 1 + len(query)), tuple(starts))


def pad_layout(layout: SequenceLayout, n_total: int, pad_ids: Optional[Sequence[int]] = None) -> SequenceLayout:
    """Append PAD positions up to ``n_total``.

    ``pad_ids`` lets callers place arbitrary token ids at the PAD positions;
    the PAD role, not the id, is what excludes them from attention.
    """
    extra = n_total - layout.n
    if extra < 0:
        raise InvalidInput(f"layout of length {layout.n} exceeds n_total={n_total}")
    if pad_ids is None:
        pad_ids = [PAD_ID] * extra
    if len(pad_ids) != extra:
        raise InvalidInput("pad_ids length must equal the number of appended positions")
    roles = np.concatenate([layout.roles, np.full(extra, TokenRole.PAD, dtype=np.int8)])
    ids = np.concatenate([layout.token_ids, np.asarray(pad_ids, dtype=np.int64)])
    return SequenceLayout(roles, ids, layout.query_span, layout.sentence_starts)


@dataclass(frozen=True)
class PatternConfig:
    """Which attention components are enabled.

    Flags left as ``None`` are filled from the preset; explicitly passing a
    flag that disagrees with the preset is an error. ``symmetric_globals``
    is an experimental switch: when False, query tokens get global rows only
    and [SOS] tokens global columns only. It is not a supported preset.
    """

    window_w: int = 128
    preset: Preset = Preset.QDS
    query_global: Optional[bool] = None
    sentence_global: Optional[bool] = None
    cls_global: Optional[bool] = None
    symmetric_globals: bool = True

    def __post_init__(self):
        preset = Preset.parse(self.preset)
        object.__setattr__(self, "preset", preset)
        w = self.window_w
        if isinstance(w, bool) or not isinstance(w, (int, np.integer)) or w < 0:
            raise InvalidInput(f"window must be a non-negative integer, got {w!r}")
        if w % 2:
            raise InvalidInput(f"window must be even, got {w}")
        object.__setattr__(self, "window_w", int(w))
        expected = _PRESET_FLAGS[preset]
        for name, want in zip(("query_global", "sentence_global", "cls_global"), expected):
            got = getattr(self, name)
            if got is None:
                object.__setattr__(self, name, want)
            elif preset is not Preset.FULL and bool(got) != want:
                raise InvalidInput(f"{name}={got} conflicts with preset {preset.value}")

    def to_dict(self) -> dict:
        d = {"window_w": self.window_w, "preset": self.preset.value}
        if not self.symmetric_globals:
            d["symmetric_globals"] = False
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PatternConfig":
        return cls(
            window_w=d.get("window_w", d.get("window", 128)),
            preset=d.get("preset", "qds"),
            symmetric_globals=d.get("symmetric_globals", True),
        )


def _index_set(values) -> np.ndarray:
    arr = np.unique(np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.int64))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BlockSparsePattern:
    """Band + global rows/columns adjacency over ``n`` positions.

    ``half_window`` of None means the pattern has no band component at all
    (as for the stand-alone global masks). Positions at or beyond
    ``n_valid`` are PAD and take part in no edge.
    """

    n: int
    half_window: Optional[int] = None
    global_rows: np.ndarray = field(default_factory=lambda: _index_set([]))
    global_cols: np.ndarray = field(default_factory=lambda: _index_set([]))
    full: bool = False
    n_valid: Optional[int] = None

    def __post_init__(self):
        if self.n < 1:
            raise InvalidInput("pattern length must be positive")
        nv = self.n if self.n_valid is None else int(self.n_valid)
        if not 0 <= nv <= self.n:
            raise InvalidInput("n_valid out of range")
        object.__setattr__(self, "n_valid", nv)
        rows = _index_set(self.global_rows)
        cols = _index_set(self.global_cols)
        for arr in (rows, cols):
            if len(arr) and (arr[0] < 0 or arr[-1] >= nv):
                raise InvalidInput("global index outside the non-PAD range")
        object.__setattr__(self, "global_rows", rows)
        object.__setattr__(self, "global_cols", cols)
        if self.half_window is not None and self.half_window < 0:
            raise InvalidInput("half_window must be non-negative")

    def contains(self, i: int, j: int) -> bool:
        if not (0 <= i < self.n_valid and 0 <= j < self.n_valid):
            return False
        if self.full:
            return True
        if self.half_window is not None and abs(i - j) <= self.half_window:
            return True
        return bool(np.isin(i, self.global_rows) or np.isin(j, self.global_cols))

    def row_mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[self.global_rows] = True
        return m

    def col_mask(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[self.global_cols] = True
        return m

    def dense(self) -> np.ndarray:
        """Expand to an ``n x n`` boolean matrix. Meant for small n."""
        n, nv = self.n, self.n_valid
        out = np.zeros((n, n), dtype=bool)
        if self.full:
            out[:nv, :nv] = True
            return out
        if self.half_window is not None:
            idx = np.arange(nv)
            out[:nv, :nv] = np.abs(idx[:, None] - idx[None, :]) <= self.half_window
        out[self.global_rows, :nv] = True
        out[:nv, self.global_cols] = True
        return out

    def row_support(self) -> np.ndarray:
        """Number of allowed columns in each row (zeros for PAD rows)."""
        n, nv = self.n, self.n_valid
        counts = np.zeros(n, dtype=np.int64)
        if nv == 0:
            return counts
        if self.full:
            counts[:nv] = nv
            return counts
        i = np.arange(nv)
        if self.half_window is not None:
            lo = np.maximum(i - self.half_window, 0)
            hi = np.minimum(i + self.half_window, nv - 1)
            band = hi - lo + 1
            # global columns falling inside each row's band, via prefix sums
            is_col = np.zeros(nv + 1, dtype=np.int64)
            is_col[self.global_cols + 1] = 1
            csum = np.cumsum(is_col)
            overlap = csum[hi + 1] - csum[lo]
        else:
            band = np.zeros(nv, dtype=np.int64)
            overlap = np.zeros(nv, dtype=np.int64)
        counts[:nv] = band + len(self.global_cols) - overlap
        counts[self.global_rows] = nv
        return counts

    @property
    def nonzeros(self) -> int:
        return int(self.row_support().sum())


def union(*patterns: BlockSparsePattern) -> BlockSparsePattern:
    """Union of patterns over the same positions.

    Bands are all centred on the diagonal, so their union is the widest one.
    """
    if not patterns:
        raise InvalidInput("union of zero patterns")
    n, nv = patterns[0].n, patterns[0].n_valid
    if any(p.n != n or p.n_valid != nv for p in patterns):
        raise InvalidInput("patterns cover different lengths")
    halves = [p.half_window for p in patterns if p.half_window is not None]
    return BlockSparsePattern(
        n=n,
        half_window=max(halves) if halves else None,
        global_rows=np.concatenate([p.global_rows for p in patterns]),
        global_cols=np.concatenate([p.global_cols for p in patterns]),
        full=any(p.full for p in patterns),
        n_valid=nv,
    )


def local_mask(n: int, w: int, n_valid: Optional[int] = None) -> BlockSparsePattern:
    if w < 0 or w % 2:
        raise InvalidInput(f"window must be even and non-negative, got {w}")
    if n < 1:
        raise InvalidInput("n must be at least 1")
    return BlockSparsePattern(n=n, half_window=w // 2, n_valid=n_valid)


def sentence_mask(layout: SequenceLayout, symmetric: bool = True) -> BlockSparsePattern:
    starts = list(layout.sentence_starts)
    return BlockSparsePattern(
        n=layout.n, global_rows=starts if symmetric else [], global_cols=starts, n_valid=layout.n_valid
    )


def query_mask(layout: SequenceLayout, symmetric: bool = True) -> BlockSparsePattern:
    q = layout.query_positions
    return BlockSparsePattern(
        n=layout.n, global_rows=q, global_cols=q if symmetric else [], n_valid=layout.n_valid
    )


def cls_mask(layout: SequenceLayout) -> BlockSparsePattern:
    return BlockSparsePattern(n=layout.n, global_rows=[0], global_cols=[0], n_valid=layout.n_valid)


def build_pattern(layout: SequenceLayout, config: PatternConfig) -> BlockSparsePattern:
    n, nv = layout.n, layout.n_valid
    preset = config.preset
    if preset is Preset.FULL:
        return BlockSparsePattern(n=n, full=True, n_valid=nv)

    parts = [local_mask(n, config.window_w, n_valid=nv)]
    if preset is Preset.LONGFORMER_QA:
        special = [0] + list(layout.sentence_starts[:1])
        parts.append(BlockSparsePattern(n=n, global_rows=special, global_cols=special, n_valid=nv))
    else:
        sym = config.symmetric_globals
        if config.query_global:
            parts.append(query_mask(layout, symmetric=sym))
        if config.sentence_global:
            parts.append(sentence_mask(layout, symmetric=sym))
        if config.cls_global:
            parts.append(cls_mask(layout))
    return union(*parts)


@dataclass(frozen=True)
class SparsityStats:
    nonzeros: int
    total: int

    @property
    def fraction(self) -> float:
        return self.nonzeros / self.total


def sparsity(pattern: BlockSparsePattern) -> SparsityStats:
    return SparsityStats(nonzeros=pattern.nonzeros, total=pattern.n * pattern.n)


def synthetic_layout(
    n: int,
    query_len: int = 10,
    sentence_len: int = 25,
    num_sentences: Optional[int] = None,
    vocab_size: int = 1000,
    seed: int = 0,
) -> SequenceLayout:
    """Random layout of exactly ``n`` tokens for benchmarks and tests.

    Sentences are filled with ``sentence_len`` tokens each (the last one is
    cut by truncation). If ``num_sentences`` is given, the document tokens
    are instead split as evenly as possible into that many sentences.
    """
    rng = np.random.default_rng(seed)
    first = SOS_ID + 1
    if n < query_len + 2:
        raise InvalidInput(f"n={n} too short for a query of {query_len} tokens")
    query = rng.integers(first, vocab_size, size=query_len).tolist()
    doc_len = n - query_len - 2
    if doc_len == 1:
        raise InvalidInput("a single free slot cannot hold a sentence")
    if num_sentences is not None and num_sentences > 0:
        budget = doc_len - num_sentences
        if budget < num_sentences:
            raise InvalidInput("not enough room for the requested number of sentences")
        sizes = [budget // num_sentences + (1 if k < budget % num_sentences else 0) for k in range(num_sentences)]
    else:
        full, rest = divmod(doc_len, sentence_len + 1)
        sizes = [sentence_len] * full
        if rest >= 2:
            sizes.append(rest - 1)
        elif rest == 1:
            sizes[-1] += 1
    sentences = [rng.integers(first, vocab_size, size=s).tolist() for s in sizes]
    layout = build_layout(query, sentences, max_len=n)
    assert layout.n == n
    return layout
