"""Wall-clock benchmarks of the encoder under different attention patterns.

"infer" times one forward pass to the relevance score; "train" times
forward plus backward (the optimizer step is excluded so the numbers
isolate the kernel). Both are per query-document pair.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .attention import flop_estimate
from .errors import InvalidInput
from .model import ModelConfig, ModelParams, encode, score_with_grad
from .pattern import PatternConfig, Preset, build_pattern, sparsity, synthetic_layout

log = logging.getLogger(__name__)


@dataclass
class BenchSpec:
    presets: Sequence[str] = ("full", "local", "longformer_qa", "qds")
    lengths: Sequence[int] = (512, 1024, 2048)
    windows: Sequence[int] = (128,)
    dim: int = 256
    heads: int = 4
    layers: int = 4
    repetitions: int = 3
    warmup: int = 1
    seed: int = 0
    query_len: int = 10
    sentence_len: int = 25
    precision: str = "f32"
    max_len: int = 2048

    def __post_init__(self):
        if self.repetitions < 3:
            raise InvalidInput("repetitions must be at least 3")
        if self.warmup < 0:
            raise InvalidInput("warmup must be non-negative")
        if any(n > self.max_len for n in self.lengths):
            raise InvalidInput("benchmark length exceeds max_len")
        for p in self.presets:
            Preset.parse(p)
        for w in self.windows:
            PatternConfig(w, "qds")
        if self.precision not in ("f32", "f64"):
            raise InvalidInput("precision must be f32 or f64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class BenchRecord:
    preset: str
    length: int
    window: int
    sparsity: float
    infer_ms_mean: float
    infer_ms_std: float
    train_ms_mean: float
    train_ms_std: float
    flop_estimate: int
    status: str = "ok"


def _globals_for(preset: Preset, layout):
    q, s = len(layout.query_span), layout.num_sentences
    return {
        Preset.LOCAL_ONLY: (0, 0),
        Preset.LONGFORMER_QA: (0, min(s, 1)),
        Preset.QDS_Q: (q, 0),
        Preset.QDS_S: (0, s),
        Preset.QDS: (q, s),
        Preset.FULL: (q, s),
    }[preset]


def _time(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return statistics.fmean(out), statistics.stdev(out)


def run_bench(spec: BenchSpec, progress=None) -> List[BenchRecord]:
    records = []
    cfg0 = ModelConfig(spec.layers, spec.dim, spec.heads, vocab_size=1000, max_len=spec.max_len, dropout_rate=0.0)
    params = ModelParams.initialize(cfg0, seed=spec.seed, dtype=spec.dtype)
    for preset_name in spec.presets:
        preset = Preset.parse(preset_name)
        for n in spec.lengths:
            layout = synthetic_layout(n, spec.query_len, spec.sentence_len, vocab_size=1000, seed=spec.seed)
            for w in spec.windows:
                cfg = ModelConfig(spec.layers, spec.dim, spec.heads, 1000, spec.max_len, 0.0, PatternConfig(w, preset))
                pattern = build_pattern(layout, cfg.pattern)
                frac = sparsity(pattern).fraction
                q, s = _globals_for(preset, layout)
                flops = spec.layers * flop_estimate(n, spec.dim, w, q, s, full=preset is Preset.FULL).total
                try:
                    inf = _time(lambda: encode(layout, params, cfg), spec.repetitions, spec.warmup)
                    trn = _time(lambda: score_with_grad(layout, params, cfg, 1.0), spec.repetitions, spec.warmup)
                    rec = BenchRecord(preset.value, n, w, frac, *inf, *trn, flops)
                except MemoryError:
                    log.warning("out of memory at preset=%s n=%d w=%d", preset.value, n, w)
                    nan = float("nan")
                    rec = BenchRecord(preset.value, n, w, frac, nan, nan, nan, nan, flops, status="oom")
                records.append(rec)
                if progress is not None:
                    progress(rec)
    return records


def scaling_exponent(records: Sequence[BenchRecord], metric: str = "train_ms_mean") -> float:
    """Least-squares slope of log(time) against log(length)."""
    pts = [(r.length, getattr(r, metric)) for r in records if r.status == "ok"]
    lengths = sorted({n for n, _ in pts})
    if len(pts) < 3 or len(lengths) < 3 or lengths[-1] < 4 * lengths[0]:
        raise InvalidInput("need at least 3 distinct lengths spanning a factor of 4")
    x = np.log([n for n, _ in pts])
    y = np.log([t for _, t in pts])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def _commit_id() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def metadata(spec: BenchSpec, threads: Optional[int] = None) -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor(),
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpu_count": os.cpu_count(),
        "threads": threads,
        "precision": spec.precision,
        "commit": _commit_id(),
        "timing_scope": "infer = forward to score; train = forward + backward, optimizer step excluded",
        "spec": asdict(spec),
    }


def write_bench(records: Sequence[BenchRecord], out_dir, spec: BenchSpec, threads: Optional[int] = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(BenchRecord.__dataclass_fields__)
    with open(out_dir / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(names)
        for r in records:
            wr.writerow([getattr(r, k) for k in names])
    meta = metadata(spec, threads)
    meta["spec"] = {k: list(v) if isinstance(v, (tuple, list)) else v for k, v in meta["spec"].items()}
    (out_dir / "bench_meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
