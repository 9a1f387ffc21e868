"""Planar BM conditioned to leave the unit disc through an arc, and the
inversion of 3D BM absorbed on a ball.

Run: python3 demos/disc_and_inversion.py
"""

import math

import numpy as np

from slm.core import RandomSource
from slm.experiments import DiscArc, conditioned_exit_curve, disc_harmonic_measure
from slm.kelvin import conformal_inversion_check, inverted_coordinate_means

src = RandomSource(4)
upper = DiscArc(0.0, math.pi)
lower = DiscArc(math.pi + 0.2, 2 * math.pi - 0.2)

print("harmonic measure of the upper half circle from (0.5, 0):",
      f"{disc_harmonic_measure((0.5, 0.0), upper):.10f}")
print("\nt     rejection              change of measure")
for row in conditioned_exit_curve((0.0, 0.0), upper, lower, [0.1, 0.3, 0.5, 2.0], 50_000,
                                  src.batch(0)):
    a, b = row.via_rejection, row.via_ptoq
    print(f"{row.t:<5g} {a.mean:.4f} +- {a.stderr:.4f}    {b.mean:.4f} +- {b.stderr:.4f}")

x0 = np.array([1.0, 0.0, 0.0])
res = conformal_inversion_check(0.5, x0, lambda x: np.minimum(np.linalg.norm(x, axis=-1), 5.0),
                                0.5, 50_000, src.batch(1))
print(f"\ninversion: lhs {res.lhs.mean:.4f}, rhs {res.rhs.mean:.4f}, "
      f"E[weight] {res.weight.mean:.4f} +- {res.weight.stderr:.4f}")
for t, ests in inverted_coordinate_means(0.5, x0, [0.25, 0.5, 1.0], 50_000, src.batch(2)):
    print(f"  t={t:<5g} reweighted inverted coordinates:",
          " ".join(f"{e.mean:+.4f}" for e in ests))
