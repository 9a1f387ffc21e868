"""Closed forms for Brownian motion absorbed at zero and the inverse Bessel call.

The call term structure ``h(t) = E[(1/X_t - K)^+]`` for BES(3) from 1 is
evaluated through the absorbed-Brownian representation
``h(t) = int_0^{1/K} (1 - K y) p_t(1, y) dy`` with ``p_t`` the method-of-images
density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate, special

from slm.core import MCEstimate, RandomSource, TimeGrid, make_grid, mc_reduce
from slm.sde import simulate_absorbed_bm, simulate_bes3

__all__ = [
    "normal_cdf",
    "normal_pdf",
    "absorbed_bm_density",
    "absorbed_survival",
    "hitting_density",
    "inv_bessel_call",
    "inv_bessel_call_quad",
    "inv_bessel_call_deriv",
    "decrease_threshold",
    "CallTermStructure",
    "call_term_structure",
    "bes3_entrance_call",
    "bes3_from_zero_scaling_check",
    "ScalingCheck",
    "local_time_rate",
    "local_time_rate_mc",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)


def normal_cdf(x):
    """Standard normal CDF (erfc based; absolute error below 1e-16)."""
    out = special.ndtr(x)
    return float(out) if np.ndim(out) == 0 else out


def normal_pdf(x):
    # overflow of x**2 yields exp(-inf) = 0, which is the right answer
    with np.errstate(over="ignore"):
        return np.exp(-0.5 * np.square(x)) / _SQRT2PI


def _positive(**kw):
    for name, v in kw.items():
        if not np.all(np.asarray(v) > 0):
            raise ValueError(f"{name} must be positive")


def absorbed_bm_density(t, x0, y):
    """Sub-probability density of Brownian motion from ``x0`` killed at 0."""
    _positive(t=t, x0=x0, y=y)
    s = np.sqrt(t)
    out = (normal_pdf((y - x0) / s) - normal_pdf((y + x0) / s)) / s
    return float(out) if np.ndim(out) == 0 else out


def absorbed_survival(t, x0=1.0):
    """P(tau_0 > t) for Brownian motion from ``x0``: 2 Phi(x0 / sqrt t) - 1."""
    _positive(t=t, x0=x0)
    return 1.0 - 2.0 * normal_cdf(-np.asarray(x0) / np.sqrt(t))


def hitting_density(t, x0=1.0):
    """Density of the first hitting time of 0 for Brownian motion from ``x0``."""
    _positive(t=t, x0=x0)
    out = x0 / np.sqrt(2.0 * np.pi * np.power(t, 3)) * np.exp(-x0 * x0 / (2.0 * t))
    return float(out) if np.ndim(out) == 0 else out


def inv_bessel_call(t, K):
    """h(t) = E[(1/X_t - K)^+] for BES(3) started at 1, in closed form.

    ``K = 0`` gives the survival probability 2 Phi(1/sqrt t) - 1.
    """
    t = np.asarray(t, dtype=float)
    _positive(t=t)
    if K < 0:
        raise ValueError("K must be nonnegative")
    s = np.sqrt(t)
    if K == 0:
        out = 1.0 - 2.0 * special.ndtr(-1.0 / s)
    else:
        c = 1.0 / K
        # integral over (0, c) of (1 - K y)[phi_t(y - 1) - phi_t(y + 1)]
        lo_m, hi_m = -1.0 / s, (c - 1.0) / s
        lo_p, hi_p = 1.0 / s, (c + 1.0) / s
        mass_m = special.ndtr(hi_m) - special.ndtr(lo_m)
        mass_p = special.ndtr(hi_p) - special.ndtr(lo_p)
        first_m = s * (normal_pdf(lo_m) - normal_pdf(hi_m)) + mass_m
        first_p = s * (normal_pdf(lo_p) - normal_pdf(hi_p)) - mass_p
        out = (mass_m - mass_p) - K * (first_m - first_p)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def inv_bessel_call_quad(t: float, K: float, tol: float = 1e-10) -> float:
    """Adaptive-quadrature version of :func:`inv_bessel_call` (cross-check route)."""
    _positive(t=t)
    if K < 0:
        raise ValueError("K must be nonnegative")
    upper = 1.0 / K if K > 0 else np.inf
    s = math.sqrt(t)
    # the density lives within a few sd of 1
    cap = min(upper, 1.0 + 40.0 * s)

    def f(y):
        return (1.0 - K * y) * absorbed_bm_density(t, 1.0, y)

    val, _ = integrate.quad(f, 0.0, cap, epsabs=tol, epsrel=tol, limit=400,
                            points=[1.0] if cap > 1.0 else None)
    return val


def inv_bessel_call_deriv(t, K):
    """h'(t): local-time rate at 1/K scaled by K/2 minus the hitting density."""
    _positive(t=t, K=K)
    t = np.asarray(t, dtype=float)
    a = 1.0 / K
    rate = (np.exp(-(1.0 - a) ** 2 / (2.0 * t)) - np.exp(-(1.0 + a) ** 2 / (2.0 * t)))
    out = K / (2.0 * np.sqrt(2.0 * np.pi * t)) * rate - np.exp(-1.0 / (2.0 * t)) / np.sqrt(
        2.0 * np.pi * t ** 3)
    return float(out) if out.ndim == 0 else out


def decrease_threshold(K: float) -> float:
    """Time after which h is strictly decreasing, for strikes K > 1/2."""
    if not K > 0.5:
        raise ValueError("threshold exists only for K > 1/2 (h decreases everywhere otherwise)")
    return 1.0 / (K * math.log((2.0 * K + 1.0) / (2.0 * K - 1.0)))


def local_time_rate(t, level, x0=1.0):
    """d/dt E[L^level_{t ^ tau_0}] for Brownian motion from x0 killed at 0."""
    _positive(t=t, level=level)
    return float(absorbed_bm_density(t, x0, level))


def local_time_rate_mc(t: float, level: float, n_paths: int, src: RandomSource,
                       dt: float = 0.1, workers=None) -> MCEstimate:
    """Coarse Monte-Carlo estimate of the local-time rate via Tanaka.

    ``E L^a_{t ^ tau_0} = E|B_{t ^ tau_0} - a| - |x0 - a|``, differenced
    centrally over ``[t - dt, t + dt]`` on common paths.
    """
    grid = TimeGrid(np.array([0.0, t - dt, t + dt]))
    b = simulate_absorbed_bm(1.0, grid, src, n_paths, workers=workers)
    lo = np.abs(b.at(t - dt)[:, 0] - level)
    hi = np.abs(b.at(t + dt)[:, 0] - level)
    return mc_reduce((hi - lo) / (2.0 * dt), src.seed)


@dataclass(frozen=True, eq=False)
class CallTermStructure:
    K: float
    t_grid: TimeGrid
    values: np.ndarray
    derivative: np.ndarray
    threshold: float | None


def call_term_structure(K: float, t_grid: TimeGrid) -> CallTermStructure:
    t = t_grid.times
    if t[0] <= 0:
        t_grid = TimeGrid(t[t > 0])
        t = t_grid.times
    deriv = inv_bessel_call_deriv(t, K) if K > 0 else -hitting_density(t, 1.0)
    thr = decrease_threshold(K) if K > 0.5 else None
    return CallTermStructure(K, t_grid, np.atleast_1d(inv_bessel_call(t, K)),
                             np.atleast_1d(deriv), thr)


# --------------------------------------------------------------------------
# BES(3) from zero


def bes3_entrance_call(t: float, K: float) -> float:
    """E[(1/X_t - K)^+] for BES(3) from 0, by quadrature of the Maxwell law.

    X_t / sqrt(t) has density sqrt(2/pi) r^2 exp(-r^2/2); the payoff is
    positive for r < 1 / (K sqrt t).
    """
    _positive(t=t)
    s = math.sqrt(t)
    upper = 1.0 / (K * s) if K > 0 else np.inf

    def f(r):
        return (1.0 / (s * r) - K) * math.sqrt(2.0 / math.pi) * r * r * math.exp(-0.5 * r * r)

    val, _ = integrate.quad(f, 0.0, upper, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


class ScalingCheck(NamedTuple):
    lhs: MCEstimate  # E(1/X_u - K)^+
    rhs: MCEstimate  # c^{-1/2} E(1/X_t - sqrt(c) K)^+
    earlier: MCEstimate  # E(1/X_t - K)^+


def bes3_from_zero_scaling_check(t: float, u: float, K: float, n_paths: int,
                                 src: RandomSource, workers=None) -> ScalingCheck:
    """Both sides of the Brownian-scaling identity for BES(3) from 0.

    The left side is estimated at time ``u`` from one batch of paths; the
    scaled right side and the same-strike value at ``t`` come from an
    independent batch, so joint standard errors apply to every comparison.
    """
    if not 0 < t < u:
        raise ValueError("need 0 < t < u")
    if K < 0:
        raise ValueError("K must be nonnegative")
    c = u / t
    xu = simulate_bes3(0.0, make_grid(u, 1), src.batch(0), n_paths, workers=workers).at(u)[:, 0]
    xt = simulate_bes3(0.0, make_grid(t, 1), src.batch(1), n_paths, workers=workers).at(t)[:, 0]
    lhs = mc_reduce(np.maximum(1.0 / xu - K, 0.0), src.seed)
    rhs = mc_reduce(np.maximum(1.0 / xt - math.sqrt(c) * K, 0.0) / math.sqrt(c), src.seed)
    earlier = mc_reduce(np.maximum(1.0 / xt - K, 0.0), src.seed)
    return ScalingCheck(lhs, rhs, earlier)
