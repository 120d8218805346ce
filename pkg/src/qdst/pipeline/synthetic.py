"""Planted-relevance ranking task for desk-scale training runs.

Every query is a short phrase of "topic" words. Each query has one
relevant candidate whose text contains the query phrase verbatim inside
one of its sentences. The other candidates are filler text; a share of
them carry a different query's phrase, so that the task cannot be solved
without comparing the document against the query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .data import Corpus, Document, Qrels


@dataclass
class RankingTask:
    queries: Dict[str, str]
    corpus: Corpus
    qrels: Qrels
    candidates: Dict[str, List[str]]


def make_planted_task(
    num_queries: int = 200,
    num_candidates: int = 20,
    query_len: int = 2,
    num_topic_words: int = 400,
    num_filler_words: int = 400,
    sentences_per_doc=(3, 6),
    sentence_len=(5, 10),
    distractor_share: float = 0.5,
    seed: int = 0,
) -> RankingTask:
    rng = np.random.default_rng(seed)
    topic = [f"t{i}" for i in range(num_topic_words)]
    filler = [f"w{i}" for i in range(num_filler_words)]

    phrases = []
    seen = set()
    while len(phrases) < num_queries:
        idx = tuple(rng.choice(num_topic_words, size=query_len, replace=False).tolist())
        if idx not in seen:
            seen.add(idx)
            phrases.append([topic[i] for i in idx])

    def sentence():
        return [filler[i] for i in rng.integers(0, num_filler_words, size=rng.integers(*sentence_len, endpoint=True))]

    def doc_text(plant=None):
        sents = [sentence() for _ in range(rng.integers(*sentences_per_doc, endpoint=True))]
        if plant is not None:
            s = sents[rng.integers(len(sents))]
            at = int(rng.integers(len(s) + 1))
            s[at:at] = plant
        return " ".join(" ".join(s) + "." for s in sents)

    queries, corpus, grades, candidates = {}, {}, {}, {}
    for qi, phrase in enumerate(phrases):
        qid = f"q{qi}"
        queries[qid] = " ".join(phrase)
        rel_slot = int(rng.integers(num_candidates))
        cands = []
        for c in range(num_candidates):
            doc_id = f"{qid}_d{c}"
            if c == rel_slot:
                text = doc_text(phrase)
                grades[(qid, doc_id)] = 1
            else:
                plant = None
                if rng.random() < distractor_share:
                    other = int(rng.integers(num_queries - 1))
                    plant = phrases[other + (other >= qi)]
                text = doc_text(plant)
                grades[(qid, doc_id)] = 0
            corpus[doc_id] = Document.from_text(doc_id, text)
            cands.append(doc_id)
        candidates[qid] = cands
    return RankingTask(queries, corpus, Qrels.from_dict(grades, max_grade=1), candidates)
