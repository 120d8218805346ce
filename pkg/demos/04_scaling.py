"""Wall-clock scaling of FULL versus QDS attention.

Run:  python demos/04_scaling.py [dim] [layers]

Times forward and forward+backward passes of a randomly initialized
encoder at n = 512, 1024, 2048 and fits the log-log slope. With small
models the fixed per-token work hides the quadratic term; the default
dim=256, layers=4 takes about a minute on one core.
"""

import sys

from qdst.attention import flop_estimate
from qdst.bench import BenchSpec, run_bench, scaling_exponent

dim = int(sys.argv[1]) if len(sys.argv) > 1 else 256
layers = int(sys.argv[2]) if len(sys.argv) > 2 else 4

spec = BenchSpec(presets=("full", "local", "qds"), lengths=(512, 1024, 2048), dim=dim, layers=layers)
recs = run_bench(spec, progress=lambda r: print(f"  {r.preset:>5} n={r.length:<5} train {r.train_ms_mean:8.1f} ms"))

print(f"\n{'preset':>6} {'n':>5} {'sparsity':>9} {'infer ms':>9} {'train ms':>9} {'est. MACs':>12}")
for r in recs:
    print(f"{r.preset:>6} {r.length:>5} {r.sparsity:9.4f} {r.infer_ms_mean:9.1f} {r.train_ms_mean:9.1f} {r.flop_estimate:12.3e}")

print("\nfitted exponent (time ~ n^k)")
for p in spec.presets:
    rs = [r for r in recs if r.preset == p]
    print(f"  {p:>5}: forward {scaling_exponent(rs, 'infer_ms_mean'):.2f}, forward+backward {scaling_exponent(rs):.2f}")

# the cost model alone, without timing noise
full = [flop_estimate(n, dim, 128, 10, n // 26, full=True).total for n in (512, 2048)]
qds = [flop_estimate(n, dim, 128, 10, n // 26).total for n in (512, 2048)]
print(f"\ncost model growth 512 -> 2048: full x{full[1] / full[0]:.1f}, qds x{qds[1] / qds[0]:.1f}")
