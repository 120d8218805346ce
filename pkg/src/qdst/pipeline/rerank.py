from __future__ import annotations

from typing import Dict, List, Protocol, Sequence

from ..errors import MissingDocument
from .data import Corpus, Document, RunList
from .text import Vocabulary, ids_for, words


class Scorer(Protocol):
    def score(self, query_tokens: Sequence[int], doc_sentences: Sequence[Sequence[int]]) -> float: ...


def document_ids(doc: Document, vocab: Vocabulary) -> List[List[int]]:
    return [ids_for(s, vocab) for s in doc.sentences]


def rerank(
    query_id: str,
    query: str,
    candidates: Sequence[str],
    corpus: Corpus,
    model: Scorer,
    vocab: Vocabulary,
) -> RunList:
    """Score every candidate with ``model`` and sort best first.

    Ties are broken by ascending doc_id. Raises :class:`MissingDocument`
    naming every candidate absent from ``corpus``.
    """
    missing = [d for d in candidates if d not in corpus]
    if missing:
        raise MissingDocument(missing)
    q_ids = ids_for(words(query), vocab)
    scores: Dict[str, float] = {}
    for doc_id in dict.fromkeys(candidates):
        scores[doc_id] = model.score(q_ids, document_ids(corpus[doc_id], vocab))
    return RunList.from_scores(query_id, scores)
