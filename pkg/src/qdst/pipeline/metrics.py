"""Ranking metrics over :class:`RunList` / :class:`Qrels`.

Unjudged documents count as grade 0. MRR and AP use a binary relevance
threshold (grade >= 1 unless overridden).
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional

from ..errors import InvalidInput
from .data import Qrels, RunList


class Gain(str, enum.Enum):
    EXP = "exp"  # 2^g - 1, gdeval
    LINEAR = "linear"  # g, trec_eval ndcg_cut


def _gain(g: int, kind: Gain) -> float:
    return float(2 ** g - 1) if kind is Gain.EXP else float(g)


def _grades(run: RunList, qrels: Qrels) -> List[int]:
    return [qrels.grade(run.query_id, d) for d in run.doc_ids]


def dcg(grades: Iterable[int], k: int, gain: Gain = Gain.EXP) -> float:
    return sum(_gain(g, gain) / math.log2(r + 1) for r, g in enumerate(list(grades)[:k], start=1))


def ndcg_at_k(run: RunList, qrels: Qrels, k: int = 10, gain=Gain.EXP) -> float:
    """NDCG@k; 0.0 when the query has no relevant document."""
    if k < 1:
        raise InvalidInput("k must be at least 1")
    gain = Gain(gain)
    ideal = sorted(qrels.for_query(run.query_id).values(), reverse=True)
    idcg = dcg(ideal, k, gain)
    if idcg == 0:
        return 0.0
    return dcg(_grades(run, qrels), k, gain) / idcg


def mrr_at_k(run: RunList, qrels: Qrels, k: int = 10, positive_threshold: int = 1) -> float:
    """Reciprocal rank of the first relevant document in the top k."""
    if k < 1:
        raise InvalidInput("k must be at least 1")
    for r, g in enumerate(_grades(run, qrels)[:k], start=1):
        if g >= positive_threshold:
            return 1.0 / r
    return 0.0


def average_precision(run: RunList, qrels: Qrels, positive_threshold: int = 1) -> Optional[float]:
    """AP over the whole run, or None when the query has no relevant document."""
    total_rel = sum(1 for g in qrels.for_query(run.query_id).values() if g >= positive_threshold)
    if total_rel == 0:
        return None
    hits = 0
    acc = 0.0
    for r, g in enumerate(_grades(run, qrels), start=1):
        if g >= positive_threshold:
            hits += 1
            acc += hits / r
    return acc / total_rel


def err_at_k(run: RunList, qrels: Qrels, k: int = 20, max_grade: Optional[int] = None) -> float:
    """Expected reciprocal rank with stopping probability (2^g - 1) / 2^max_grade."""
    if k < 1:
        raise InvalidInput("k must be at least 1")
    top = qrels.max_grade if max_grade is None else max_grade
    denom = 2.0 ** top
    err = 0.0
    not_stopped = 1.0
    for r, g in enumerate(_grades(run, qrels)[:k], start=1):
        stop = (2.0 ** g - 1.0) / denom
        err += not_stopped * stop / r
        not_stopped *= 1.0 - stop
    return err


@dataclass
class MetricResult:
    name: str
    per_query: Dict[str, float]
    flagged: List[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return math.fsum(self.per_query.values()) / len(self.per_query)


_METRIC = re.compile(r"^(ndcg|mrr|map|err)(?:@(\d+))?$")


def parse_metric(name: str):
    m = _METRIC.match(name.strip().lower())
    if not m:
        raise InvalidInput(f"unknown metric {name!r}; use ndcg@k, mrr@k, map or err@k")
    kind, k = m.group(1), m.group(2)
    if kind == "map":
        if k is not None:
            raise InvalidInput("map takes no cut-off")
        return kind, None
    k = int(k) if k else {"ndcg": 10, "mrr": 10, "err": 20}[kind]
    if k < 1:
        raise InvalidInput(f"cut-off must be at least 1 in {name!r}")
    return kind, k


def evaluate(
    runs: Mapping[str, RunList],
    qrels: Qrels,
    metric: str,
    gain=Gain.EXP,
    positive_threshold: int = 1,
) -> MetricResult:
    """Per-query values and their mean for one metric.

    Queries are those present in the run. For NDCG, a query without any
    relevant document scores 0 and is flagged; for MAP such queries are
    flagged and left out of the mean.
    """
    kind, k = parse_metric(metric)
    result = MetricResult(metric, {})
    for qid in sorted(runs):
        run = runs[qid]
        has_rel = any(g >= positive_threshold for g in qrels.for_query(qid).values())
        if kind == "ndcg":
            value = ndcg_at_k(run, qrels, k, gain)
        elif kind == "mrr":
            value = mrr_at_k(run, qrels, k, positive_threshold)
        elif kind == "err":
            value = err_at_k(run, qrels, k)
        else:
            value = average_precision(run, qrels, positive_threshold)
        if not has_rel:
            result.flagged.append(qid)
        if value is not None:
            result.per_query[qid] = value
    return result
