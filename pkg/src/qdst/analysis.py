"""Attention diagnostics by token role.

``traces`` arguments are per-input lists of per-layer
:class:`~qdst.attention.AttentionTrace` objects, as returned by
``encode(..., record_trace=True)``. Layer numbers are 1-based;
negative numbers count from the last layer (-1 is the last).
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import AttentionTrace
from .errors import EmptyResult, InvalidInput
from .pattern import SequenceLayout, TokenRole

TARGET_ROLES = (TokenRole.QUERY, TokenRole.SOS, TokenRole.CLS)


@dataclass
class RoleAttentionProfile:
    """Mean over heads, source rows and inputs of the per-row max attention
    onto targets of each role. Pairs with no reachable target are absent."""

    values: Dict[Tuple[int, TokenRole], float] = field(default_factory=dict)
    num_layers: int = 0

    def get(self, layer: int, role: TokenRole) -> Optional[float]:
        return self.values.get((layer, TokenRole(role)))

    def rows(self):
        for (layer, role), v in sorted(self.values.items()):
            yield layer, role.name, v


@dataclass
class RoleEntropyProfile:
    """Mean row entropy (nats) by layer and source-token role."""

    values: Dict[Tuple[int, TokenRole], float] = field(default_factory=dict)
    num_layers: int = 0

    def get(self, layer: int, role: TokenRole) -> Optional[float]:
        return self.values.get((layer, TokenRole(role)))

    def rows(self):
        for (layer, role), v in sorted(self.values.items()):
            yield layer, role.name, v


def _check_inputs(traces, layouts):
    if not traces:
        raise InvalidInput("no traces given")
    if len(traces) != len(layouts):
        raise InvalidInput("traces and layouts differ in length")
    depth = len(traces[0])
    if depth == 0 or any(len(t) != depth for t in traces):
        raise InvalidInput("every input needs the same, non-zero number of layer traces")
    return depth


def _nonempty_rows(trace: AttentionTrace):
    counts = np.diff(trace.indptr)
    rows = np.flatnonzero(counts)
    return rows, trace.indptr[rows]


def role_max_attention(
    traces: Sequence[Sequence[AttentionTrace]],
    layouts: Sequence[SequenceLayout],
    roles: Sequence[TokenRole] = TARGET_ROLES,
) -> RoleAttentionProfile:
    depth = _check_inputs(traces, layouts)
    sums = defaultdict(list)
    counts = defaultdict(int)
    for per_layer, layout in zip(traces, layouts):
        for l, tr in enumerate(per_layer, start=1):
            rows, starts = _nonempty_rows(tr)
            if rows.size == 0:
                continue
            target_role = layout.roles[tr.indices]
            for role in roles:
                hit = target_role == role
                reach = np.add.reduceat(hit.astype(np.int64), starts) > 0
                if not reach.any():
                    continue
                w = np.where(hit[None, :], tr.weights, -np.inf)
                best = np.maximum.reduceat(w, starts, axis=1)[:, reach]
                sums[(l, role)].append(float(best.astype(np.float64).sum()))
                counts[(l, role)] += best.size
    prof = RoleAttentionProfile(num_layers=depth)
    for key, parts in sums.items():
        prof.values[key] = math.fsum(parts) / counts[key]
    return prof


def row_entropies(trace: AttentionTrace) -> np.ndarray:
    """Entropy in nats of every head's row, shape ``(heads, n)``; PAD rows 0."""
    w = trace.weights.astype(np.float64)
    plogp = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)
    out = np.zeros((trace.num_heads, trace.n))
    rows, starts = _nonempty_rows(trace)
    if rows.size:
        out[:, rows] = -np.add.reduceat(plogp, starts, axis=1)
    return out


def role_entropy(traces, layouts, roles: Optional[Sequence[TokenRole]] = None) -> RoleEntropyProfile:
    depth = _check_inputs(traces, layouts)
    roles = [r for r in TokenRole if r is not TokenRole.PAD] if roles is None else list(roles)
    sums = defaultdict(list)
    counts = defaultdict(int)
    for per_layer, layout in zip(traces, layouts):
        for l, tr in enumerate(per_layer, start=1):
            ent = row_entropies(tr)
            has_row = np.diff(tr.indptr) > 0
            for role in roles:
                sel = (layout.roles == role) & has_row
                if not sel.any():
                    continue
                sums[(l, role)].append(float(ent[:, sel].sum()))
                counts[(l, role)] += int(sel.sum()) * tr.num_heads
    prof = RoleEntropyProfile(num_layers=depth)
    for key, parts in sums.items():
        prof.values[key] = math.fsum(parts) / counts[key]
    return prof


def _layer_trace(trace_layers: Sequence[AttentionTrace], layer: int) -> AttentionTrace:
    depth = len(trace_layers)
    idx = layer - 1 if layer > 0 else depth + layer
    if layer == 0 or not 0 <= idx < depth:
        raise InvalidInput(f"layer {layer} out of range for {depth} layer(s)")
    return trace_layers[idx]


def _row_weights_onto(trace: AttentionTrace, row: int, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Attention of ``row`` onto ``targets`` for every head; unreachable -> 0."""
    cols, w = trace.row(row)
    out = np.zeros((trace.num_heads, len(targets)), dtype=np.float64)
    pos = np.searchsorted(cols, targets)
    ok = (pos < len(cols)) & (cols[np.minimum(pos, len(cols) - 1)] == targets) if len(cols) else np.zeros(len(targets), bool)
    out[:, ok] = w[:, pos[ok]]
    return out, ok


def top_attended_sentences(
    trace_layers: Sequence[AttentionTrace],
    layout: SequenceLayout,
    source: Union[str, int] = "cls",
    layer: int = -1,
    per_head: bool = True,
    top_k: int = 1,
) -> List[Tuple[int, int, float]]:
    """Sentences ranked by the attention ``source`` pays to their [SOS].

    Returns ``(head, sentence_index, weight)`` triples. With ``per_head``
    each head contributes its own top ``top_k``; otherwise each sentence is
    scored by its best head and the overall top ``top_k`` is returned.
    """
    tr = _layer_trace(trace_layers, layer)
    if isinstance(source, str):
        if source.lower() != "cls":
            raise InvalidInput(f"unknown source {source!r}")
        row = 0
    else:
        row = int(source)
        if not 0 <= row < layout.n_valid:
            raise InvalidInput(f"source position {row} is not a valid token")
    if top_k < 1:
        raise InvalidInput("top_k must be positive")
    sos = np.asarray(layout.sentence_starts, dtype=np.int64)
    if sos.size == 0:
        raise EmptyResult("layout has no sentences")
    w, reachable = _row_weights_onto(tr, row, sos)
    if not reachable.any():
        raise EmptyResult(f"position {row} cannot attend to any [SOS] token")
    idx = np.flatnonzero(reachable)
    out = []
    if per_head:
        for h in range(tr.num_heads):
            order = sorted(idx, key=lambda s: (-w[h, s], s))[:top_k]
            out.extend((h, int(s), float(w[h, s])) for s in order)
    else:
        best_head = np.argmax(w, axis=0)
        best = w[best_head, np.arange(len(sos))]
        order = sorted(idx, key=lambda s: (-best[s], s))[:top_k]
        out.extend((int(best_head[s]), int(s), float(best[s])) for s in order)
    return out


def top_query_token_per_sentence(trace_layers, layout: SequenceLayout, layer: int = -1):
    """For every [SOS] row, the query position it attends to most.

    Weights are maxed over heads; ties go to the lowest position. Sentences
    whose [SOS] reaches no query token report ``(sentence, None, 0.0)``.
    """
    tr = _layer_trace(trace_layers, layer)
    qpos = layout.query_positions
    out = []
    for s_idx, row in enumerate(layout.sentence_starts):
        w, ok = _row_weights_onto(tr, row, qpos)
        if not ok.any():
            out.append((s_idx, None, 0.0))
            continue
        best = np.where(ok, w.max(axis=0), -np.inf)
        k = int(np.argmax(best))  # first maximum = lowest position
        out.append((s_idx, int(qpos[k]), float(best[k])))
    return out


def write_profile_csv(profile, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "role", "value"])
        for layer, role, v in profile.rows():
            wr.writerow([layer, role, repr(v)])


def write_top_sentences_csv(rows, path):
    """``rows``: iterables of (qid, docid, head, sentence_idx, weight, sentence_text)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["qid", "docid", "head", "sentence_idx", "weight", "sentence_text"])
        for r in rows:
            wr.writerow(r)
