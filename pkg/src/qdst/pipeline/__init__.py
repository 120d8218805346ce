from .data import (
    Corpus,
    Document,
    Qrels,
    RunList,
    load_corpus,
    load_queries,
    read_qrels,
    read_run,
    write_corpus_tsv,
    write_qrels,
    write_queries_tsv,
    write_run,
)
from .metrics import Gain, MetricResult, average_precision, err_at_k, evaluate, mrr_at_k, ndcg_at_k, parse_metric
from .rerank import document_ids, rerank
from .synthetic import RankingTask, make_planted_task
from .text import Vocabulary, split_sentences, tokenize, words
