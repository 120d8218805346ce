"""Documents, qrels and run lists, with TREC-format readers and writers.

Formats (whitespace delimited)::

    qrels:   qid 0 docid grade
    run:     qid Q0 docid rank score tag
    corpus:  doc_id<TAB>text            or JSON lines {"doc_id": ..., "text": ...}
    queries: qid<TAB>query text
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from ..errors import InvalidInput, ParseError
from .text import split_sentences, words

log = logging.getLogger(__name__)


@dataclass
class Document:
    doc_id: str
    raw_text: str
    sentence_texts: List[str]
    sentences: List[List[str]]

    @classmethod
    def from_text(cls, doc_id: str, text: str) -> "Document":
        texts, toks = [], []
        for s in split_sentences(text):
            w = words(s)
            if w:
                texts.append(s)
                toks.append(w)
        if not toks:
            raise InvalidInput(f"document {doc_id!r} has no tokens")
        return cls(doc_id, text, texts, toks)


Corpus = Dict[str, Document]


@dataclass
class Qrels:
    grades: Dict[Tuple[str, str], int]
    max_grade: int
    unjudged_mapped: int = 0

    def __post_init__(self):
        if any(g < 0 or g > self.max_grade for g in self.grades.values()):
            raise InvalidInput("grade outside [0, max_grade]")

    @classmethod
    def from_dict(cls, grades: Dict[Tuple[str, str], int], max_grade: Optional[int] = None) -> "Qrels":
        top = max(grades.values(), default=0)
        return cls(dict(grades), max(top, 1) if max_grade is None else max_grade)

    def grade(self, qid: str, doc_id: str) -> int:
        return self.grades.get((qid, doc_id), 0)

    def query_ids(self) -> List[str]:
        return sorted({q for q, _ in self.grades})

    def for_query(self, qid: str) -> Dict[str, int]:
        return {d: g for (q, d), g in self.grades.items() if q == qid}

    def __len__(self):
        return len(self.grades)


@dataclass
class RunList:
    """Ranked candidates of one query, best first.

    Ordering is by descending score; equal scores fall back to ascending
    doc_id so that rankings are reproducible.
    """

    query_id: str
    entries: List[Tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        ids = [d for d, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise InvalidInput(f"duplicate doc_id in run for query {self.query_id}")

    @classmethod
    def from_scores(cls, query_id: str, scores: Dict[str, float]) -> "RunList":
        entries = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(query_id, [(d, float(s)) for d, s in entries])

    @property
    def doc_ids(self) -> List[str]:
        return [d for d, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if line.strip():
                yield no, line


def read_qrels(path, max_grade: Optional[int] = None) -> Qrels:
    """Read ``qid 0 docid grade`` lines.

    A grade of -1 (TREC's "unjudged") is stored as 0; the number of such
    lines is kept in ``unjudged_mapped`` and logged.
    """
    grades = {}
    mapped = 0
    for no, line in _lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", no, path)
        qid, _, doc_id, g = parts
        try:
            grade = int(g)
        except ValueError:
            raise ParseError(f"grade {g!r} is not an integer", no, path) from None
        if grade == -1:
            grade = 0
            mapped += 1
        elif grade < 0:
            raise ParseError(f"negative grade {grade}", no, path)
        grades[(qid, doc_id)] = grade
    if mapped:
        log.warning("%s: %d judgement(s) with grade -1 mapped to 0", path, mapped)
    q = Qrels.from_dict(grades, max_grade)
    q.unjudged_mapped = mapped
    return q


def read_run(path) -> Dict[str, RunList]:
    per_query: Dict[str, List[Tuple[int, str, float]]] = {}
    for no, line in _lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"expected 6 fields, got {len(parts)}", no, path)
        qid, _, doc_id, rank, score, _tag = parts
        try:
            per_query.setdefault(qid, []).append((int(rank), doc_id, float(score)))
        except ValueError:
            raise ParseError("rank must be an integer and score a number", no, path) from None
    runs = {}
    for qid, rows in per_query.items():
        rows.sort(key=lambda r: r[0])
        runs[qid] = RunList(qid, [(d, s) for _, d, s in rows])
    return runs


def write_run(path, runs: Iterable[RunList], tag: str = "qdst", k: Optional[int] = None):
    """Write runs with ranks 1..k; scores use ``repr`` so they read back exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for run in runs:
            for rank, (doc_id, s) in enumerate(run.entries[:k] if k else run.entries, start=1):
                fh.write(f"{run.query_id} Q0 {doc_id} {rank} {float(s)!r} {tag}\n")


def load_corpus(path) -> Corpus:
    """Load a TSV (``doc_id<TAB>text``) or JSON-lines corpus, by extension."""
    path = Path(path)
    corpus: Corpus = {}
    jsonl = path.suffix in (".jsonl", ".json")
    for no, line in _lines(path):
        if jsonl:
            try:
                rec = json.loads(line)
                doc_id, text = str(rec["doc_id"]), rec["text"]
            except (ValueError, KeyError, TypeError):
                raise ParseError("expected a JSON object with doc_id and text", no, path) from None
        else:
            parts = line.rstrip("\n").split("\t", 1)
            if len(parts) != 2:
                raise ParseError("expected doc_id<TAB>text", no, path)
            doc_id, text = parts
        try:
            corpus[doc_id] = Document.from_text(doc_id, text)
        except InvalidInput as exc:
            raise ParseError(str(exc), no, path) from None
    return corpus


def load_queries(path) -> Dict[str, str]:
    queries = {}
    for no, line in _lines(path):
        parts = line.rstrip("\n").split("\t", 1)
        if len(parts) != 2 or not parts[1].strip():
            raise ParseError("expected qid<TAB>query text", no, path)
        queries[parts[0]] = parts[1]
    return queries


def write_corpus_tsv(path, corpus: Corpus):
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.values():
            fh.write(f"{doc.doc_id}\t{doc.raw_text}\n")


def write_queries_tsv(path, queries: Dict[str, str]):
    with open(path, "w", encoding="utf-8") as fh:
        for qid, text in queries.items():
            fh.write(f"{qid}\t{text}\n")


def write_qrels(path, qrels: Qrels):
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, doc_id), g in sorted(qrels.grades.items()):
            fh.write(f"{qid} 0 {doc_id} {g}\n")
