"""Price payoffs on the strict local martingale using only absorbed Brownian paths.

Run: python3 demos/payoff_duality.py
"""

from slm.core import RandomSource, joint_z
from slm.htransform import (call, capped, dual_expectation, inverse_bessel_pair, payoff_transform,
                            put, sqrt_payoff)

pair = inverse_bessel_pair()
src = RandomSource(2)
payoffs = {"(x-0.5)+": call(0.5), "(2-x)+": put(2.0), "sqrt(x)": sqrt_payoff,
           "min(x,1.5)": capped(1.5)}

print(f"{'payoff':<11} {'eta':>4} {'t':>5}  {'direct':>18}  {'via reciprocal':>18}  z")
for j, (name, h) in enumerate(payoffs.items()):
    tr = payoff_transform(h)
    for k, t in enumerate((0.25, 1.0)):
        r = dual_expectation(pair, tr, t, 100_000, src.batch(2 * j + k))
        print(f"{name:<11} {tr.eta:>4g} {t:>5g}  {r.lhs.mean:.5f} +- {r.lhs.stderr:.5f}"
              f"  {r.rhs.mean:.5f} +- {r.rhs.stderr:.5f}  {joint_z(r.lhs, r.rhs):+.2f}")

# x^2 grows too fast at infinity: eta is infinite and the identity does not apply
print("\nx^2 eta:", payoff_transform(lambda x: x ** 2).eta)
