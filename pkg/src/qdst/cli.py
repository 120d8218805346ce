"""Command-line entry point: ``qdst <command> [options]``.

Commands: pattern, train, rerank, eval, bench, analyze. A run is driven
by an optional JSON config (``--config``) whose sections mirror the
library's config objects::

    {"model":   {"num_layers": 2, "dim": 64, "num_heads": 4, "max_len": 512, "dropout_rate": 0.1},
     "pattern": {"preset": "qds", "window_w": 16},
     "train":   {"learning_rate": 1e-3, "batch_size": 8, "max_steps": 2000, "loss_kind": "pairwise_softmax"},
     "data":    {"corpus": "docs.tsv", "queries": "queries.tsv", "qrels": "qrels.txt",
                 "candidates": "bm25.run"}        # or {"synthetic": {"num_queries": 50}}
     "bench":   {"presets": ["full", "qds"], "lengths": [512, 1024, 2048]},
     "analysis": {"layer": -1, "top_k": 3, "max_pairs": 20}}

Command-line flags override config values. Exit codes: 2 invalid
configuration, 3 data problems, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidInput, MissingDocument, NumericalError, ParseError, EmptyResult

log = logging.getLogger("qdst")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# --- config plumbing -----------------------------------------------------------


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _section(cfg, name):
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(sec)


def _out_dir(args, cfg):
    return Path(args.out or cfg.get("out") or ".")


def _seed(args, cfg):
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _write_manifest(out_dir: Path, args, cfg, resolved, started):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "version": __version__,
        "config_path": str(args.config) if args.config else None,
        "resolved_config": resolved,
        "seed": _seed(args, cfg),
        "output_dir": str(out_dir),
        "threads": args.threads,
        "precision": args.precision,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")


def _dtype(args):
    return np.float64 if args.precision == "f64" else np.float32


@contextlib.contextmanager
def _thread_limit(n):
    if not n:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        yield
        return
    with threadpool_limits(limits=n):
        yield


def _pattern_config(cfg, args=None):
    from .pattern import PatternConfig

    sec = _section(cfg, "pattern")
    if args is not None:
        if getattr(args, "preset", None) is not None:
            sec["preset"] = args.preset
        if getattr(args, "window", None) is not None:
            sec["window_w"] = args.window
    try:
        return PatternConfig.from_dict(sec)
    except InvalidInput as exc:
        raise ConfigError(str(exc)) from None


def _model_config(cfg, vocab_size, args=None):
    from .model import ModelConfig

    sec = _section(cfg, "model")
    sec.pop("vocab_size", None)
    sec.pop("pattern", None)
    try:
        return ModelConfig(vocab_size=vocab_size, pattern=_pattern_config(cfg, args), **sec)
    except (InvalidInput, TypeError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from None


def _train_config(cfg, args):
    from .model import TrainConfig

    sec = _section(cfg, "train")
    sec.pop("eval_every", None)
    sec["seed"] = _seed(args, cfg)
    if getattr(args, "steps", None) is not None:
        sec["max_steps"] = args.steps
    try:
        return TrainConfig(**sec)
    except (InvalidInput, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from None


def _load_task(cfg, args):
    """Queries, corpus, qrels (may be None) and candidate lists."""
    from .pipeline import data as D
    from .pipeline.synthetic import make_planted_task

    sec = _section(cfg, "data")
    if "synthetic" in sec:
        opts = sec["synthetic"] or {}
        opts.setdefault("seed", _seed(args, cfg))
        try:
            return make_planted_task(**opts)
        except TypeError as exc:
            raise ConfigError(f"invalid synthetic data options: {exc}") from None
    for key in ("corpus", "queries", "candidates"):
        if key not in sec:
            raise ConfigError(f"data section needs {key!r} (or a 'synthetic' block)")
    try:
        corpus = D.load_corpus(sec["corpus"])
        queries = D.load_queries(sec["queries"])
        runs = D.read_run(sec["candidates"])
        qrels = D.read_qrels(sec["qrels"]) if sec.get("qrels") else D.Qrels({}, 1)
    except OSError as exc:
        raise DataError(str(exc)) from None
    candidates = {q: r.doc_ids for q, r in runs.items() if q in queries}
    if not candidates:
        raise DataError("no candidate list matches a query id")
    from .pipeline.synthetic import RankingTask

    return RankingTask(queries, corpus, qrels, candidates)


def _model_paths(cfg, args):
    sec = _section(cfg, "rerank")
    model = getattr(args, "model", None) or sec.get("model") or cfg.get("model_path")
    if not model:
        raise ConfigError("no model file given (use --model)")
    model = Path(model)
    vocab = getattr(args, "vocab", None) or sec.get("vocab") or model.with_name("vocab.json")
    return model, Path(vocab)


def _load_ranker(cfg, args):
    from .errors import CorruptModel
    from .model import Ranker
    from .pipeline.text import Vocabulary

    model_path, vocab_path = _model_paths(cfg, args)
    try:
        ranker = Ranker.load(model_path)
        vocab = Vocabulary.load(vocab_path)
    except (OSError, CorruptModel, ValueError) as exc:
        raise DataError(f"cannot load model: {exc}") from None
    if args.precision == "f64":
        ranker.params = ranker.params.astype(np.float64)
    return ranker, vocab


# --- commands --------------------------------------------------------------------------


def cmd_pattern(args, cfg):
    from .pattern import build_pattern, sparsity, synthetic_layout

    pconf = _pattern_config(cfg, args)
    sec = _section(cfg, "pattern")
    n = args.n if args.n is not None else sec.get("n", 64)
    q_len = sec.get("query_len", 10 if n >= 32 else 1)
    try:
        layout = synthetic_layout(int(n), query_len=q_len, sentence_len=sec.get("sentence_len", 25 if n >= 256 else 6),
                                  seed=_seed(args, cfg))
    except InvalidInput as exc:
        raise ConfigError(str(exc)) from None
    pat = build_pattern(layout, pconf)
    stats = sparsity(pat)
    summary = {
        "n": pat.n,
        "preset": pconf.preset.value,
        "window": pconf.window_w,
        "half_window": pat.half_window,
        "global_rows": pat.global_rows.tolist(),
        "global_cols": pat.global_cols.tolist(),
        "full": pat.full,
        "query_len": len(layout.query_span),
        "sentence_starts": list(layout.sentence_starts),
        "nonzeros": stats.nonzeros,
        "fraction": stats.fraction,
    }
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    if pat.n <= 512:
        np.savetxt(out / "pattern.csv", pat.dense().astype(np.int8), fmt="%d", delimiter=",")
    (out / "pattern.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps({k: summary[k] for k in ("n", "preset", "window", "nonzeros", "fraction")}))
    return {"pattern": pconf.to_dict(), "n": pat.n}


def cmd_train(args, cfg):
    from .experiments import TokenizedTask, train_and_evaluate

    tcfg = _train_config(cfg, args)
    task = _load_task(cfg, args)
    if not len(task.qrels):
        raise DataError("training needs relevance judgements")
    tt = TokenizedTask.build(task)
    mcfg = _model_config(cfg, len(tt.vocab), args)
    eval_every = int(_section(cfg, "train").get("eval_every", 0) or 0) or tcfg.max_steps
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    res = train_and_evaluate(tt, mcfg, tcfg, eval_every=eval_every, target_mrr=None,
                             init_seed=_seed(args, cfg), dtype=_dtype(args))
    res.ranker.save(out / "model.qdst")
    tt.vocab.save(out / "vocab.json")
    with open(out / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "loss"])
        for i, l in enumerate(res.losses, start=1):
            wr.writerow([i, repr(float(l))])
    print(json.dumps({"steps": res.steps_run, "final_loss": res.losses[-1], **res.metrics}))
    return {"model": mcfg.to_dict(), "train": {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(tcfg).items()}}


def cmd_rerank(args, cfg):
    from .pipeline.data import write_run
    from .pipeline.rerank import rerank

    ranker, vocab = _load_ranker(cfg, args)
    task = _load_task(cfg, args)
    out = _out_dir(args, cfg)
    runs = []
    try:
        for qid in sorted(task.candidates):
            runs.append(rerank(qid, task.queries[qid], task.candidates[qid], task.corpus, ranker, vocab))
    except MissingDocument as exc:
        raise DataError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    write_run(out / "run.trec", runs, tag=args.tag)
    print(f"wrote {sum(len(r) for r in runs)} lines for {len(runs)} queries to {out / 'run.trec'}")
    return {"model": ranker.config.to_dict()}


def cmd_eval(args, cfg):
    from .pipeline.data import read_qrels, read_run
    from .pipeline.metrics import Gain, evaluate, parse_metric

    metrics = args.metric or ["ndcg@10"]
    try:
        for m in metrics:
            parse_metric(m)
        gain = Gain(args.gain)
    except (InvalidInput, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    try:
        runs = read_run(args.run)
        qrels = read_qrels(args.qrels)
    except OSError as exc:
        raise DataError(str(exc)) from None
    if not len(qrels):
        raise DataError(f"{args.qrels}: no relevance judgements")
    results = [evaluate(runs, qrels, m, gain=gain) for m in metrics]
    print("metric\tqid\tvalue")
    for res in results:
        for qid, v in res.per_query.items():
            print(f"{res.name}\t{qid}\t{v:.6f}")
        print(f"{res.name}\tall\t{res.mean:.6f}")
        if res.flagged:
            log.warning("%s: %d quer(ies) without relevant documents: %s", res.name, len(res.flagged), ", ".join(res.flagged))
    return {"metrics": metrics, "gain": gain.value}


def cmd_bench(args, cfg):
    from .bench import BenchSpec, run_bench, write_bench

    sec = _section(cfg, "bench")
    if args.presets:
        sec["presets"] = args.presets
    if args.lengths:
        sec["lengths"] = args.lengths
    if args.window is not None:
        sec["windows"] = [args.window]
    sec.setdefault("seed", _seed(args, cfg))
    sec.setdefault("precision", args.precision)
    try:
        spec = BenchSpec(**sec)
    except (InvalidInput, TypeError) as exc:
        raise ConfigError(f"invalid bench config: {exc}") from None
    out = _out_dir(args, cfg)
    records = run_bench(spec, progress=lambda r: log.info("%s n=%d w=%d infer=%.1fms train=%.1fms",
                                                          r.preset, r.length, r.window, r.infer_ms_mean, r.train_ms_mean))
    write_bench(records, out, spec, threads=args.threads)
    print(f"wrote {len(records)} records to {out / 'bench.csv'}")
    return {"bench": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}}


def cmd_analyze(args, cfg):
    from .analysis import (
        role_entropy,
        role_max_attention,
        top_attended_sentences,
        write_profile_csv,
        write_top_sentences_csv,
    )
    from .pipeline.rerank import document_ids
    from .pipeline.text import ids_for, words

    sec = _section(cfg, "analysis")
    layer = args.layer if args.layer is not None else sec.get("layer", -1)
    top_k = int(sec.get("top_k", 3))
    max_pairs = int(sec.get("max_pairs", 20))
    ranker, vocab = _load_ranker(cfg, args)
    depth = ranker.config.num_layers
    if depth == 0 or layer == 0 or not -depth <= layer <= depth:
        raise ConfigError(f"--layer {layer} out of range for a {depth}-layer model")
    task = _load_task(cfg, args)

    traces, layouts, top_rows = [], [], []
    pairs = [(q, d) for q in sorted(task.candidates) for d in task.candidates[q]][:max_pairs]
    for qid, doc_id in pairs:
        if doc_id not in task.corpus:
            raise DataError(str(MissingDocument([doc_id])))
        doc = task.corpus[doc_id]
        layout, _, tr = ranker.encode(ids_for(words(task.queries[qid]), vocab), document_ids(doc, vocab), record_trace=True)
        traces.append(tr)
        layouts.append(layout)
        try:
            for head, s_idx, w in top_attended_sentences(tr, layout, "cls", layer, per_head=True, top_k=top_k):
                top_rows.append((qid, doc_id, head, s_idx, repr(w), doc.sentence_texts[s_idx]))
        except EmptyResult:
            pass
    if not traces:
        raise DataError("nothing to analyze")
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_profile_csv(role_max_attention(traces, layouts), out / "role_max.csv")
    write_profile_csv(role_entropy(traces, layouts), out / "entropy.csv")
    write_top_sentences_csv(top_rows, out / "top_sentences.csv")
    print(f"analyzed {len(traces)} pairs; wrote role_max.csv, entropy.csv, top_sentences.csv to {out}")
    return {"analysis": {"layer": layer, "top_k": top_k, "max_pairs": max_pairs}}


# --- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--threads", type=int, default=int(os.environ.get("QDST_THREADS", "0")) or None,
                        help="BLAS thread count (default: $QDST_THREADS)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qdst", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"qdst {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pattern", parents=[common], help="dump an attention pattern")
    sp.add_argument("--n", type=int)
    sp.add_argument("--preset")
    sp.add_argument("--window", type=int)

    sp = sub.add_parser("train", parents=[common], help="train a ranker")
    sp.add_argument("--preset")
    sp.add_argument("--window", type=int)
    sp.add_argument("--steps", type=int)

    for name, helptext in (("rerank", "rerank candidate lists"), ("analyze", "attention diagnostics")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--model", type=Path)
        sp.add_argument("--vocab", type=Path)
        if name == "rerank":
            sp.add_argument("--tag", default="qdst")
        else:
            sp.add_argument("--layer", type=int)

    sp = sub.add_parser("eval", parents=[common], help="evaluate a TREC run")
    sp.add_argument("run", type=Path)
    sp.add_argument("qrels", type=Path)
    sp.add_argument("--metric", action="append", help="ndcg@10 | mrr@10 | map | err@20 (repeatable)")
    sp.add_argument("--gain", default="exp", help="exp | linear")

    sp = sub.add_parser("bench", parents=[common], help="time presets across lengths")
    sp.add_argument("--presets", nargs="+")
    sp.add_argument("--lengths", nargs="+", type=int)
    sp.add_argument("--window", type=int)
    return p


COMMANDS = {
    "pattern": cmd_pattern,
    "train": cmd_train,
    "rerank": cmd_rerank,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        cfg = _load_config(args.config)
        with _thread_limit(args.threads):
            resolved = COMMANDS[args.command](args, cfg)
        if args.command != "eval" or args.out:
            _write_manifest(_out_dir(args, cfg), args, cfg, resolved, started)
    except (ConfigError, InvalidInput) as exc:
        print(f"qdst {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, MissingDocument) as exc:
        print(f"qdst {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"qdst {args.command}: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
