"""Train a small reranker on the planted-phrase task, then rerank and score.

Run:  python demos/02_train_and_rerank.py [preset] [steps]

Each query is a short phrase planted in exactly one of its candidate
documents; the other candidates share its topic words but not the phrase.
A two-layer model trained from scratch learns to find it within a few
hundred pairwise steps. Writes run.trec to the working directory.
"""

import logging
import sys

from qdst.experiments import TokenizedTask, rerank_task, train_and_evaluate
from qdst.model import ModelConfig, TrainConfig
from qdst.pattern import PatternConfig
from qdst.pipeline import evaluate, make_planted_task, write_run

logging.basicConfig(level=logging.INFO, format="%(message)s")

preset = sys.argv[1] if len(sys.argv) > 1 else "qds"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600

task = make_planted_task(num_queries=60, num_candidates=10, seed=0)
tt = TokenizedTask.build(task)
qid = sorted(task.queries)[0]
rel = next(d for d in task.candidates[qid] if task.qrels.grade(qid, d) > 0)
print(f"{len(task.queries)} queries, vocabulary {len(tt.vocab)}")
print(f"example query {qid!r}: {task.queries[qid]!r}")
print(f"its relevant document: {task.corpus[rel].raw_text[:120]}...\n")

cfg = ModelConfig(num_layers=2, dim=64, num_heads=4, vocab_size=len(tt.vocab), max_len=512,
                  dropout_rate=0.1, pattern=PatternConfig(16, preset))
tc = TrainConfig(learning_rate=1e-3, batch_size=8, max_steps=steps, loss_kind="pairwise_softmax")
result = train_and_evaluate(tt, cfg, tc, eval_every=100, target_mrr=None)

runs = rerank_task(result.ranker, tt)
write_run("run.trec", runs.values(), tag=f"qdst-{preset}")
print("\nfinal held-in metrics:")
for name in ("mrr@10", "ndcg@10", "map", "err@20"):
    print(f"  {name:8} {evaluate(runs, task.qrels, name).mean:.4f}")
print(f"wrote run.trec ({sum(len(r.entries) for r in runs.values())} lines) in {result.seconds:.0f}s")
