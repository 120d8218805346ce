import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qdst.errors import InvalidInput, MissingDocument, ParseError
from qdst.pattern import CLS_ID as CLS, PAD_ID as PAD, SEP_ID as SEP, SOS_ID as SOS, UNK_ID as UNK
from qdst.pipeline import (
    Document,
    Qrels,
    RunList,
    Vocabulary,
    load_corpus,
    load_queries,
    make_planted_task,
    read_qrels,
    read_run,
    rerank,
    split_sentences,
    tokenize,
    words,
    write_run,
)


# --- text ------------------------------------------------------------------------------------


def test_split_examples():
    assert split_sentences("A. B? C!") == ["A.", "B?", "C!"]
    assert split_sentences("no terminator") == ["no terminator"]
    assert split_sentences("") == []
    assert split_sentences("  \n ") == []


def test_split_abbreviation_guard():
    text = "Dr. Gray met Mr. Smith, e.g. at noon. Then he left."
    assert split_sentences(text) == ["Dr. Gray met Mr. Smith, e.g. at noon.", "Then he left."]


def test_split_requires_whitespace_after_terminator():
    assert split_sentences("pi is 3.14 roughly. ok") == ["pi is 3.14 roughly.", "ok"]
    assert split_sentences("Really?! Yes.") == ["Really?!", "Yes."]


def test_document_rejects_empty_text():
    with pytest.raises(InvalidInput):
        Document.from_text("d1", "   ")
    with pytest.raises(InvalidInput):
        Document.from_text("d1", "... !!!")


def test_document_sentences_are_token_lists():
    doc = Document.from_text("d1", "Robert Gray sailed. A captain!")
    assert doc.sentences == [["robert", "gray", "sailed"], ["a", "captain"]]
    assert doc.raw_text == "Robert Gray sailed. A captain!"


def test_vocabulary_reserved_ids():
    v = Vocabulary()
    ids = {v.get(t) for t in Vocabulary.RESERVED}
    assert ids == {PAD, UNK, CLS, SEP, SOS}
    assert len(v) == 5


def test_tokenize_build_and_frozen():
    v = Vocabulary()
    ids = tokenize("Robert Gray", v, build_mode=True)
    assert ids == [v.get("robert"), v.get("gray")] and len(set(ids)) == 2
    assert tokenize("robert zebra", v) == [ids[0], UNK]
    assert "zebra" not in v


def test_vocabulary_roundtrip(tmp_path):
    v = Vocabulary()
    tokenize("one two three two", v, build_mode=True)
    v.save(tmp_path / "v.json")
    w = Vocabulary.load(tmp_path / "v.json")
    assert w.to_json() == v.to_json() and w.get("three") == v.get("three")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=8), min_size=1, max_size=12))
def test_tokenize_idempotent(tokens):
    v = Vocabulary()
    first = tokenize(" ".join(tokens), v, build_mode=True)
    again = tokenize(" ".join(v.token(i) for i in first), v)
    assert again == first
    assert words(" ".join(tokens)) == tokens


# --- formats ---------------------------------------------------------------------------------


def test_run_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    runs = [
        RunList.from_scores(f"q{i}", {f"d{j}": float(np.float32(rng.standard_normal())) for j in range(7)})
        for i in range(3)
    ]
    path = tmp_path / "run.trec"
    write_run(path, runs)
    back = read_run(path)
    for r in runs:
        assert back[r.query_id].entries == r.entries
    ranks = [int(line.split()[3]) for line in path.read_text().splitlines()[:7]]
    assert ranks == list(range(1, 8))


def test_run_sorting_and_ties():
    r = RunList.from_scores("q", {"b": 1.0, "a": 1.0, "c": 2.0})
    assert r.doc_ids == ["c", "a", "b"]
    with pytest.raises(InvalidInput):
        RunList("q", [("a", 1.0), ("a", 0.5)])


def test_run_parse_error_line_number(tmp_path):
    path = tmp_path / "bad.run"
    path.write_text("q1 Q0 d1 1 0.5 tag\nq1 Q0 d2 2 0.4\n")
    with pytest.raises(ParseError) as exc:
        read_run(path)
    assert exc.value.line_number == 2 and "2" in str(exc.value)


def test_qrels_unjudged_mapping(tmp_path):
    path = tmp_path / "qrels.txt"
    path.write_text("q1 0 d1 2\nq1 0 d2 -1\nq1 0 d3 0\nq2 0 d9 -1\n")
    qrels = read_qrels(path)
    assert qrels.grade("q1", "d2") == 0 and qrels.grade("q2", "d9") == 0
    assert qrels.unjudged_mapped == 2
    assert qrels.max_grade == 2
    assert qrels.grade("q1", "never-seen") == 0


def test_qrels_parse_errors(tmp_path):
    path = tmp_path / "qrels.txt"
    path.write_text("q1 0 d1\n")
    with pytest.raises(ParseError):
        read_qrels(path)
    path.write_text("q1 0 d1 x\n")
    with pytest.raises(ParseError):
        read_qrels(path)


def test_qrels_grade_above_scale():
    with pytest.raises(InvalidInput):
        Qrels.from_dict({("q", "d"): 5}, max_grade=3)


def test_corpus_tsv_and_jsonl(tmp_path):
    tsv = tmp_path / "docs.tsv"
    tsv.write_text("d1\tFirst doc. Second sentence.\nd2\tAnother one\n")
    jl = tmp_path / "docs.jsonl"
    jl.write_text("\n".join(json.dumps({"doc_id": d, "text": t}) for d, t in
                            [("d1", "First doc. Second sentence."), ("d2", "Another one")]))
    a, b = load_corpus(tsv), load_corpus(jl)
    assert a.keys() == b.keys() == {"d1", "d2"}
    assert a["d1"].sentences == b["d1"].sentences == [["first", "doc"], ["second", "sentence"]]
    bad = tmp_path / "bad.tsv"
    bad.write_text("d1 no tab here\n")
    with pytest.raises(ParseError):
        load_corpus(bad)


def test_load_queries(tmp_path):
    path = tmp_path / "q.tsv"
    path.write_text("q1\twho is robert gray\n")
    assert load_queries(path) == {"q1": "who is robert gray"}


# --- reranking -------------------------------------------------------------------------------


class LengthScorer:
    """Scores a document by its token count; ignores the query."""

    def score(self, query_tokens, doc_sentences):
        return float(sum(len(s) for s in doc_sentences))


class ConstantScorer:
    def score(self, query_tokens, doc_sentences):
        return 0.0


def _corpus():
    docs = {"a": "one two three.", "b": "one.", "c": "one two.", "z": "one two."}
    return {k: Document.from_text(k, v) for k, v in docs.items()}


def test_rerank_orders_by_score():
    run = rerank("q", "one", ["b", "a", "c"], _corpus(), LengthScorer(), Vocabulary())
    assert run.doc_ids == ["a", "c", "b"]


def test_rerank_single_and_ties():
    assert rerank("q", "x", ["c"], _corpus(), ConstantScorer(), Vocabulary()).doc_ids == ["c"]
    assert rerank("q", "x", ["z", "c"], _corpus(), ConstantScorer(), Vocabulary()).doc_ids == ["c", "z"]


def test_rerank_missing_documents():
    with pytest.raises(MissingDocument) as exc:
        rerank("q", "x", ["a", "nope", "gone"], _corpus(), ConstantScorer(), Vocabulary())
    assert sorted(exc.value.doc_ids) == ["gone", "nope"]
    assert "nope" in str(exc.value)


# --- synthetic task --------------------------------------------------------------------------


def test_planted_task_shape():
    t = make_planted_task(num_queries=30, num_candidates=8, seed=1)
    assert len(t.queries) == 30
    for qid, cands in t.candidates.items():
        assert len(cands) == 8
        rel = [d for d in cands if t.qrels.grade(qid, d) >= 1]
        assert len(rel) == 1
        phrase = t.queries[qid]
        assert phrase in t.corpus[rel[0]].raw_text
        for d in cands:
            if d != rel[0]:
                assert phrase not in t.corpus[d].raw_text


def test_planted_task_deterministic():
    a = make_planted_task(num_queries=5, seed=3)
    b = make_planted_task(num_queries=5, seed=3)
    assert a.queries == b.queries
    assert {k: d.raw_text for k, d in a.corpus.items()} == {k: d.raw_text for k, d in b.corpus.items()}
