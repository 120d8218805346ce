import csv
import json

import numpy as np
import pytest

import qdst.bench as bench_mod
from qdst.bench import BenchRecord, BenchSpec, run_bench, scaling_exponent, write_bench
from qdst.errors import InvalidInput
from qdst.pattern import PatternConfig, build_pattern, sparsity, synthetic_layout

SMALL = dict(lengths=(64, 128, 256), dim=32, heads=2, layers=1, repetitions=3, warmup=0, sentence_len=12)


def records(times, preset="x"):
    return [BenchRecord(preset, n, 0, 1.0, t, 0.0, t, 0.0, 0) for n, t in times]


def test_exponent_exact_fits():
    assert abs(scaling_exponent(records([(n, 3e-6 * n * n) for n in (512, 1024, 2048)])) - 2.0) <= 1e-6
    assert abs(scaling_exponent(records([(n, 0.5 * n) for n in (100, 250, 400)])) - 1.0) <= 1e-6


def test_exponent_needs_enough_points():
    with pytest.raises(InvalidInput):
        scaling_exponent(records([(512, 1.0), (1024, 2.0)]))
    with pytest.raises(InvalidInput):
        scaling_exponent(records([(512, 1.0), (700, 2.0), (1024, 3.0)]))  # spans < 4x


def test_spec_validation():
    with pytest.raises(InvalidInput):
        BenchSpec(repetitions=2)
    with pytest.raises(InvalidInput):
        BenchSpec(lengths=(4096,))
    with pytest.raises(InvalidInput):
        BenchSpec(presets=("bogus",))
    with pytest.raises(InvalidInput):
        BenchSpec(windows=(7,))


def test_small_grid_cardinality_and_passthrough():
    spec = BenchSpec(**SMALL)
    recs = run_bench(spec)
    assert len(recs) == 12
    for r in recs:
        assert r.status == "ok" and r.infer_ms_std >= 0 and r.train_ms_std >= 0
        lay = synthetic_layout(r.length, spec.query_len, spec.sentence_len, vocab_size=1000, seed=spec.seed)
        assert r.sparsity == sparsity(build_pattern(lay, PatternConfig(r.window, r.preset))).fraction


def test_deterministic_columns():
    spec = BenchSpec(**SMALL)
    a, b = run_bench(spec), run_bench(spec)
    assert [(r.sparsity, r.flop_estimate) for r in a] == [(r.sparsity, r.flop_estimate) for r in b]


def test_oom_cell_recorded(monkeypatch):
    real = bench_mod.encode

    def fake(layout, *args, **kwargs):
        if layout.n == 128:
            raise MemoryError
        return real(layout, *args, **kwargs)

    monkeypatch.setattr(bench_mod, "encode", fake)
    recs = run_bench(BenchSpec(presets=("qds",), **SMALL))
    assert [r.status for r in recs] == ["ok", "oom", "ok"]


def test_write_bench(tmp_path):
    spec = BenchSpec(presets=("qds",), **SMALL)
    write_bench(run_bench(spec), tmp_path, spec, threads=1)
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert len(rows) == 3 and set(rows[0]) >= {"preset", "length", "sparsity", "train_ms_mean", "flop_estimate"}
    meta = json.loads((tmp_path / "bench_meta.json").read_text())
    for key in ("machine", "threads", "precision", "commit", "timing_scope"):
        assert key in meta


# --- measured properties (reference configuration) ------------------------------------------


@pytest.fixture(scope="module")
def measured():
    spec = BenchSpec(presets=("full", "local", "longformer_qa", "qds"), lengths=(1024, 2048))
    return run_bench(spec)


def _cell(recs, preset, n):
    return next(r for r in recs if r.preset == preset and r.length == n)


@pytest.mark.slow
def test_doubling_ratios(measured):
    full = _cell(measured, "full", 2048).train_ms_mean / _cell(measured, "full", 1024).train_ms_mean
    qds = _cell(measured, "qds", 2048).train_ms_mean / _cell(measured, "qds", 1024).train_ms_mean
    assert 2.5 <= full <= 4.5
    assert 1.6 <= qds <= 2.6


@pytest.mark.slow
def test_flops_rank_matches_time_rank(measured):
    cells = [r for r in measured if r.length == 2048]
    flops = np.argsort(np.argsort([r.flop_estimate for r in cells]))
    times = np.argsort(np.argsort([r.train_ms_mean for r in cells]))
    m = len(cells)
    rho = 1 - 6 * float(((flops - times) ** 2).sum()) / (m * (m * m - 1))
    assert rho >= 0.8
