# Size-biased Feller diffusions and Dyson eigenvalue ratios.
# Run: python3 demos/branching_and_eigenvalues.py

from slm.core import RandomSource
from slm.experiments import (SizeBiasedConfig, dyson_ratio_expectation, ratio_martingale_check,
                             size_biased_expectations, vandermonde_bm_control)

src = RandomSource(3)
cfg = SizeBiasedConfig(n=2, z=1.0, t_grid=[0.25, 0.5, 1.0, 2.0])

print("share of coordinate 1 under Q (should stay at 1/2)")
for t, e in ratio_martingale_check(cfg, 100_000, src.batch(0)):
    print(f"  t={t:<5g} {e.mean:.4f} +- {e.stderr:.4f}")

print("\nsize-biased law: N, U, V lose mass, M keeps it")
for r in size_biased_expectations(cfg, 100_000, src.batch(1)):
    print(f"  t={r.t:<5g} N={r.N.mean:.3f} U={r.U.mean:.3f} V={r.V.mean:.3f} "
          f"M={r.M.mean:.3f} +- {r.M.stderr:.3f}")

ts = [0.1, 0.5, 1.0, 2.0]
start = [-1.0, 0.0, 1.0]
ctrl = vandermonde_bm_control(start, ts, 100_000, src.batch(2))
dys = dyson_ratio_expectation(2, 3, start, ts, 100_000, src.batch(3))
print("\nt      Delta3(W) for plain BM   E[Delta2/Delta3] under Dyson")
for (t, c), (_, d) in zip(ctrl, dys):
    print(f"{t:<6g} {c.mean:.4f} +- {c.stderr:.4f}     {d.mean:.4f} +- {d.stderr:.4f}")
