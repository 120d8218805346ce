"""Train -> rerank -> evaluate loops on a :class:`RankingTask`.

Used for the overfit smoke test and the pattern ablation table.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .model import (
    AdamState,
    LossKind,
    ModelConfig,
    ModelParams,
    PairwiseExample,
    PointwiseExample,
    Ranker,
    TrainConfig,
    train_step,
)
from .pattern import PatternConfig
from .pipeline.data import RunList
from .pipeline.metrics import evaluate
from .pipeline.rerank import document_ids
from .pipeline.synthetic import RankingTask
from .pipeline.text import Vocabulary, ids_for, words

log = logging.getLogger(__name__)

REPORT_METRICS = ("mrr@10", "ndcg@10", "map", "err@20")


@dataclass
class TokenizedTask:
    vocab: Vocabulary
    queries: Dict[str, List[int]]
    docs: Dict[str, List[List[int]]]
    positives: Dict[str, List[str]]
    negatives: Dict[str, List[str]]
    task: RankingTask

    @classmethod
    def build(cls, task: RankingTask, vocab: Optional[Vocabulary] = None) -> "TokenizedTask":
        build_mode = vocab is None
        vocab = Vocabulary() if vocab is None else vocab
        queries = {q: ids_for(words(t), vocab, build_mode) for q, t in task.queries.items()}
        docs = {d: [ids_for(s, vocab, build_mode) for s in doc.sentences] for d, doc in task.corpus.items()}
        pos, neg = {}, {}
        for qid, cands in task.candidates.items():
            pos[qid] = [d for d in cands if task.qrels.grade(qid, d) >= 1]
            neg[qid] = [d for d in cands if task.qrels.grade(qid, d) < 1]
        return cls(vocab, queries, docs, pos, neg, task)

    def sample_batch(self, rng: np.random.Generator, size: int, loss_kind: LossKind):
        qids = [q for q in self.queries if self.positives[q] and self.negatives[q]]
        batch = []
        for qi in rng.integers(len(qids), size=size):
            qid = qids[qi]
            p = self.positives[qid][rng.integers(len(self.positives[qid]))]
            n = self.negatives[qid][rng.integers(len(self.negatives[qid]))]
            if loss_kind is LossKind.PAIRWISE_SOFTMAX:
                batch.append(PairwiseExample(self.queries[qid], self.docs[p], self.docs[n]))
            elif rng.random() < 0.5:
                batch.append(PointwiseExample(self.queries[qid], self.docs[p], 1.0))
            else:
                batch.append(PointwiseExample(self.queries[qid], self.docs[n], 0.0))
        return batch


def rerank_task(ranker: Ranker, tt: TokenizedTask) -> Dict[str, RunList]:
    runs = {}
    for qid, cands in tt.task.candidates.items():
        scores = {d: ranker.score(tt.queries[qid], tt.docs[d]) for d in cands}
        runs[qid] = RunList.from_scores(qid, scores)
    return runs


def evaluate_runs(runs, qrels, metrics: Sequence[str] = REPORT_METRICS) -> Dict[str, float]:
    return {m: evaluate(runs, qrels, m).mean for m in metrics}


@dataclass
class ExperimentResult:
    preset: str
    window: int
    steps_to_target: Optional[int]
    steps_run: int
    losses: List[float] = field(default_factory=list)
    evals: List[tuple] = field(default_factory=list)  # (step, mrr@10)
    metrics: Dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    ranker: Optional[Ranker] = None

    def row(self) -> dict:
        out = {
            "preset": self.preset,
            "window": self.window,
            "steps_to_target": self.steps_to_target if self.steps_to_target is not None else "",
            "steps_run": self.steps_run,
        }
        out.update(self.metrics)
        out["seconds"] = round(self.seconds, 1)
        return out


def train_and_evaluate(
    tt: TokenizedTask,
    model_config: ModelConfig,
    train_config: TrainConfig,
    eval_every: int = 50,
    target_mrr: Optional[float] = 0.95,
    stop_at_target: bool = True,
    init_seed: int = 0,
    dtype=np.float32,
    on_eval: Optional[Callable[[int, float], None]] = None,
) -> ExperimentResult:
    """Train from scratch and report when held-in MRR@10 first hits the target.

    Evaluation reranks every query's candidate list every ``eval_every``
    optimizer steps. With ``stop_at_target`` training ends at the first
    evaluation meeting ``target_mrr``.
    """
    start = time.perf_counter()
    params = ModelParams.initialize(model_config, seed=init_seed, dtype=dtype)
    opt = AdamState.zeros_like(params)
    rng = np.random.default_rng(train_config.seed)
    dropout_rng = rng if model_config.dropout_rate > 0 else None
    ranker = Ranker(params, model_config)
    result = ExperimentResult(model_config.pattern.preset.value, model_config.pattern.window_w, None, 0)
    qrels = tt.task.qrels

    for step in range(1, train_config.max_steps + 1):
        batch = tt.sample_batch(rng, train_config.batch_size, train_config.loss_kind)
        _, loss = train_step(batch, params, opt, train_config, model_config, rng=dropout_rng)
        result.losses.append(loss)
        result.steps_run = step
        if step % eval_every == 0 or step == train_config.max_steps:
            mrr = evaluate(rerank_task(ranker, tt), qrels, "mrr@10").mean
            result.evals.append((step, mrr))
            log.info("preset=%s step=%d loss=%.4f mrr@10=%.4f", result.preset, step, loss, mrr)
            if on_eval is not None:
                on_eval(step, mrr)
            if target_mrr is not None and mrr >= target_mrr and result.steps_to_target is None:
                result.steps_to_target = step
                if stop_at_target:
                    break

    result.metrics = evaluate_runs(rerank_task(ranker, tt), qrels)
    result.seconds = time.perf_counter() - start
    result.ranker = ranker
    return result


def ablation(
    tt: TokenizedTask,
    base_config: ModelConfig,
    train_config: TrainConfig,
    presets: Sequence[str] = ("local", "qds_q", "qds_s", "qds", "longformer_qa"),
    **kwargs,
) -> List[ExperimentResult]:
    """Run the same training recipe under several attention presets."""
    results = []
    for preset in presets:
        cfg = replace(base_config, pattern=PatternConfig(base_config.pattern.window_w, preset))
        results.append(train_and_evaluate(tt, cfg, train_config, **kwargs))
    return results


def format_table(results: Sequence[ExperimentResult]) -> str:
    rows = [r.row() for r in results]
    if not rows:
        return ""
    cols = list(rows[0])
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
    widths = [max(len(c), *(len(fmt(r[c])) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for r in rows:
        lines.append("  ".join(fmt(r[c]).ljust(w) for c, w in zip(cols, widths)))
    return "\n".join(lines)
