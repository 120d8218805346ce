"""Where does a trained reranker put its attention?

Run:  python demos/03_attention_analysis.py

Trains a small QDS model briefly, then reports per layer how strongly any
token attends to query tokens, [SOS] markers and [CLS], the average
attention entropy by token role, and which sentence [CLS] reads most for
a few relevant documents.
"""

from qdst.analysis import role_entropy, role_max_attention, top_attended_sentences, top_query_token_per_sentence
from qdst.experiments import TokenizedTask, train_and_evaluate
from qdst.model import ModelConfig, TrainConfig
from qdst.pattern import PatternConfig, TokenRole
from qdst.pipeline import make_planted_task

task = make_planted_task(num_queries=40, num_candidates=8, seed=1)
tt = TokenizedTask.build(task)
cfg = ModelConfig(num_layers=2, dim=64, num_heads=4, vocab_size=len(tt.vocab), max_len=512,
                  dropout_rate=0.0, pattern=PatternConfig(16, "qds"))
res = train_and_evaluate(tt, cfg, TrainConfig(learning_rate=1e-3, max_steps=300, loss_kind="pairwise_softmax"),
                         eval_every=100, target_mrr=None)
ranker = res.ranker
print(f"trained {res.steps_run} steps, mrr@10={res.metrics['mrr@10']:.3f}\n")

traces, layouts, picks = [], [], []
for qid in sorted(task.queries)[:10]:
    for d in task.candidates[qid]:
        layout, _, tr = ranker.encode(tt.queries[qid], tt.docs[d], record_trace=True)
        traces.append(tr)
        layouts.append(layout)
        if task.qrels.grade(qid, d) > 0:
            picks.append((qid, d, layout, tr))

mx = role_max_attention(traces, layouts)
ent = role_entropy(traces, layouts)
roles = (TokenRole.QUERY, TokenRole.SOS, TokenRole.CLS)
print("max attention received, averaged over rows and heads")
print("layer  " + "  ".join(f"{r.name:>6}" for r in roles))
for layer in range(1, cfg.num_layers + 1):
    print(f"{layer:>5}  " + "  ".join(f"{mx.get(layer, r):6.3f}" for r in roles))

print("\nmean row entropy (nats) by source role")
src = (TokenRole.CLS, TokenRole.QUERY, TokenRole.SOS, TokenRole.DOC)
print("layer  " + "  ".join(f"{r.name:>6}" for r in src))
for layer in range(1, cfg.num_layers + 1):
    print(f"{layer:>5}  " + "  ".join(f"{ent.get(layer, r):6.3f}" for r in src))

print("\nsentence read most by [CLS] in the last layer (relevant documents)")
for qid, d, layout, tr in picks[:4]:
    (_, s_idx, w), = top_attended_sentences(tr, layout, "cls", per_head=False, top_k=1)
    phrase_in = task.queries[qid] in task.corpus[d].sentence_texts[s_idx]
    print(f"  {qid} {d}: sentence {s_idx} weight {w:.3f} contains the planted phrase: {phrase_in}")
    best = top_query_token_per_sentence(tr, layout)[s_idx]
    if best[1] is not None:
        print(f"    its [SOS] attends most to query position {best[1]} ({best[2]:.3f})")
