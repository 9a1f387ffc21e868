"""Measure change by a nonnegative martingale that can hit zero.

A :class:`TransformPair` bundles a law Q, the density process ``h = dP/dQ``
(absorbed at zero) and a nonnegative Q-martingale ``f``.  Expectations of
``N = f / h`` under P are computed by simulating under Q only, through
``E^P[N_t] = E^Q[f_t 1{tau_0 > t}]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from slm.core import (DiagnosticsError, MCEstimate, PathBatch, RandomSource, TimeGrid,
                      grid_from_times, make_grid, mc_reduce, run_paths)
from slm.sde import (Family, ProcessModel, bes3_bridge_hit_prob, gbm_bridge_hit_prob,
                     normals_from_uniforms, simulate_bes3)

__all__ = [
    "TransformPair",
    "inverse_bessel_pair",
    "gbm_pair",
    "PayoffTransform",
    "EtaUndetermined",
    "UnsupportedPayoff",
    "payoff_transform",
    "call",
    "put",
    "sqrt_payoff",
    "capped",
    "p_expectation_of_N",
    "p_expectations",
    "DualResult",
    "dual_expectation",
    "martingale_defect",
    "classify_defect",
    "expected_payoff",
    "european_prices",
    "madan_yor_price",
]

StateFn = Callable[[np.ndarray], np.ndarray]


class EtaUndetermined(DiagnosticsError):
    """The limit of x h(1/x) at 0 could not be pinned down numerically."""


class UnsupportedPayoff(ValueError):
    """The payoff grows too fast at infinity for the decomposition (eta infinite)."""


@dataclass(frozen=True)
class TransformPair:
    """Q-side model with density ``h`` and numerator ``f``; ``N = f / h`` under P.

    ``f`` and ``h`` map states of shape ``(n, dim)`` to values of shape ``(n,)``;
    ``h(x0) = 1`` and ``h`` vanishes exactly on absorbed states, so
    ``{tau_0 <= t}`` is read off as ``h(X_t) == 0``.

    ``p_model`` (optional) simulates the P-law of N directly.  It is only
    meaningful when ``f == 1`` so that N is the reciprocal of the Q coordinate.
    ``max_step`` bounds the internal time step for models that need one.
    """

    q_model: object
    f: StateFn
    h: StateFn
    p_model: object | None = None
    max_step: float | None = None
    horizon: float = math.inf
    name: str = ""

    def grid(self, times: Sequence[float]) -> TimeGrid:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(times <= 0):
            raise ValueError("times must be positive")
        if np.max(times) > self.horizon:
            raise ValueError(f"time {np.max(times)} exceeds the horizon {self.horizon}")
        g = grid_from_times(times)
        return g.refine(self.max_step) if self.max_step else g

    def with_f(self, f: StateFn, name: str = "") -> TransformPair:
        return TransformPair(self.q_model, f, self.h, None, self.max_step, self.horizon,
                             name or self.name)


def _ones(x):
    return np.ones(x.shape[0])


class _ScaledInverseBessel:
    """``x0 / X`` with X a BES(3) from ``x0``: the P-law of N for the BM pair."""

    def __init__(self, x0: float):
        self.x0 = float(x0)

    def simulate(self, grid, src, n_paths=1, observe=None, workers=None) -> PathBatch:
        b = simulate_bes3(self.x0, grid, src, n_paths, observe, workers)
        return PathBatch(b.grid, b.obs_index, self.x0 / b.values, b.absorption_index,
                         b.seed, b.first_stream)


def inverse_bessel_pair(x0: float = 1.0) -> TransformPair:
    """Q = Brownian motion from x0 killed at 0, h = X / x0, f = 1.

    Under P the coordinate is BES(3) from x0, so N = x0 / X is the inverse
    Bessel process started at 1.
    """
    if not x0 > 0:
        raise ValueError("x0 must be positive")
    return TransformPair(ProcessModel.absorbed_bm(x0), _ones, lambda x: x[:, 0] / x0,
                         _ScaledInverseBessel(x0), name="inverse-bes3")


def gbm_pair(s0: float = 1.0, sigma: float = 1.0) -> TransformPair:
    """Q = GBM, h = S / s0, f = 1: h never vanishes, so N is a true martingale."""
    return TransformPair(ProcessModel.gbm(s0, sigma), _ones, lambda x: x[:, 0] / s0,
                         name="gbm")


# --------------------------------------------------------------------------
# Q-side evaluation


def _q_side(pair: TransformPair, ts, n_paths, src, workers):
    grid = pair.grid(ts)
    batch = pair.q_model.simulate(grid, src, n_paths, observe=ts, workers=workers)
    out = []
    for t in ts:
        x = batch.at(t)
        hv = pair.h(x)
        out.append((x, hv, hv > 0.0))
    return out


def p_expectations(pair: TransformPair, ts: Sequence[float], n_paths: int, src: RandomSource,
                   workers=None) -> list[tuple[float, MCEstimate]]:
    """``E^P[N_t]`` for several t from one batch of Q paths."""
    ts = [float(t) for t in np.atleast_1d(ts)]
    rows = []
    for t, (x, hv, alive) in zip(ts, _q_side(pair, ts, n_paths, src, workers)):
        vals = np.where(alive, pair.f(x), 0.0)
        rows.append((t, mc_reduce(vals, src.seed)))
    return rows


def p_expectation_of_N(pair: TransformPair, t: float, n_paths: int, src: RandomSource,
                       workers=None) -> MCEstimate:
    """Estimate ``E^P[N_t] = E^Q[f_t 1{tau_0 > t}]`` from Q paths only."""
    return p_expectations(pair, [t], n_paths, src, workers)[0][1]


def martingale_defect(pair: TransformPair, t_list: Sequence[float], n_paths: int,
                      src: RandomSource, workers=None) -> list[tuple[float, MCEstimate]]:
    """``Q(tau_0 <= t)``, i.e. ``N_0 - E^P[N_t]`` for the reciprocal coordinate."""
    ts = [float(t) for t in np.atleast_1d(t_list)]
    return [(t, mc_reduce(~alive, src.seed))
            for t, (_, _, alive) in zip(ts, _q_side(pair, ts, n_paths, src, workers))]


def classify_defect(defect: MCEstimate, k: float = 3.0) -> str:
    """'strict' when the defect on the horizon exceeds ``k`` standard errors."""
    return "strict" if defect.mean > k * defect.stderr else "consistent with martingale"


# --------------------------------------------------------------------------
# Payoff transform g(x) = x h(1/x)


def call(K: float) -> Callable:
    return lambda x: np.maximum(np.asarray(x, dtype=float) - K, 0.0)


def put(K: float) -> Callable:
    return lambda x: np.maximum(K - np.asarray(x, dtype=float), 0.0)


def sqrt_payoff(x):
    return np.sqrt(np.asarray(x, dtype=float))


def capped(c: float) -> Callable:
    return lambda x: np.minimum(np.asarray(x, dtype=float), c)


DEFAULT_PROBES = np.logspace(-12.0, 0.0, 49)


@dataclass(frozen=True)
class PayoffTransform:
    """A payoff ``h_payoff`` with ``g(x) = x h_payoff(1/x)`` and ``eta = g(0+)``."""

    h_payoff: Callable
    eta: float

    def g(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return x * self.h_payoff(1.0 / x)

    def gbar(self, x):
        """Continuous extension of g to [0, inf) with value eta at 0."""
        x = np.asarray(x, dtype=float)
        pos = x > 0.0
        out = np.full(x.shape, float(self.eta))
        out[pos] = self.g(x[pos])
        return out

    @property
    def eta_finite(self) -> bool:
        return math.isfinite(self.eta)


def payoff_transform(h_payoff: Callable, probe_grid=None, tol: float = 1e-6) -> PayoffTransform:
    """Build g and estimate eta from the smallest probe points.

    eta is the two-point linear extrapolation to 0 when successive values at
    the smallest probes agree within ``tol`` (relative to max(1, |g|)).  A
    monotone blow-up is flagged as ``eta = inf``; anything else raises
    :class:`EtaUndetermined`.
    """
    x = np.sort(np.asarray(DEFAULT_PROBES if probe_grid is None else probe_grid, dtype=float))
    if x.size < 4 or x[0] <= 0:
        raise ValueError("probe grid needs at least four positive points")
    h_vals = np.asarray(h_payoff(1.0 / x), dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        g = x * h_vals
    g0, g1, g2, g3 = g[:4]
    if not np.all(np.isfinite(g[:4])):
        if np.isposinf(g0) or np.isneginf(g0):
            return PayoffTransform(h_payoff, math.copysign(math.inf, g0))
        raise EtaUndetermined("payoff transform is not finite near 0")
    scale = max(1.0, abs(g0))
    if abs(g0 - g1) <= tol * scale and abs(g1 - g2) <= 10 * tol * max(1.0, abs(g1)):
        eta = g0 - x[0] * (g1 - g0) / (x[1] - x[0])
        if abs(eta) <= tol:
            eta = 0.0
        return PayoffTransform(h_payoff, float(eta))
    ref = max(1.0, abs(g[-1]))
    if abs(g0) > 1e6 * ref and abs(g0) > abs(g1) > abs(g2) > abs(g3):
        return PayoffTransform(h_payoff, math.copysign(math.inf, g0))
    raise EtaUndetermined(f"g(x) = x h(1/x) does not settle near 0 (values {g0:.3g}, {g1:.3g})")


class DualResult(NamedTuple):
    lhs: MCEstimate  # E^R h(X_t), simulated directly
    rhs: MCEstimate  # E^Q gbar(X_t) - eta Q(tau_0 <= t)


def dual_expectation(pair: TransformPair, transform: PayoffTransform, t: float, n_paths: int,
                     src: RandomSource, workers=None) -> DualResult:
    """Two independent estimates of the same payoff expectation.

    The left side simulates the strict local martingale itself; the right side
    uses Q paths of the reciprocal coordinate ``h`` (batch 1 of ``src``).
    """
    if not transform.eta_finite:
        raise UnsupportedPayoff("eta is infinite; the payoff is not covered")
    if pair.p_model is None:
        raise ValueError("pair has no direct P-side model for the coordinate")
    grid = pair.grid([t])
    n_t = pair.p_model.simulate(grid, src.batch(0), n_paths, observe=[t], workers=workers).at(t)
    lhs = mc_reduce(transform.h_payoff(n_t[:, 0]), src.seed)
    (x, hv, alive), = _q_side(pair, [t], n_paths, src.batch(1), workers)
    coord = np.where(alive, hv, 0.0)
    rhs = mc_reduce(transform.gbar(coord) - transform.eta * (~alive), src.seed)
    return DualResult(lhs, rhs)


# --------------------------------------------------------------------------
# Option prices on the strict local martingale


def _terminal(model: ProcessModel, t: float, n_paths: int, src: RandomSource, workers):
    if model.family is Family.SPLICED_BUBBLE:
        grid = grid_from_times([t, max(t, 2.0)])
    else:
        grid = make_grid(t, 1)
    return model.simulate(grid, src, n_paths, observe=[t], workers=workers).at(t)[:, 0]


def expected_payoff(model: ProcessModel, payoff: Callable, maturities: Sequence[float],
                    n_paths: int, src: RandomSource,
                    workers=None) -> list[tuple[float, MCEstimate]]:
    """``E[payoff(S_t)]`` at each maturity, each from its own independent batch."""
    rows = []
    for j, t in enumerate(np.atleast_1d(maturities)):
        s = _terminal(model, float(t), n_paths, src.batch(j), workers)
        rows.append((float(t), mc_reduce(payoff(s), src.seed)))
    return rows


def european_prices(model: ProcessModel, strike: float, maturities: Sequence[float], kind: str,
                    n_paths: int, src: RandomSource, workers=None):
    if kind not in ("call", "put"):
        raise ValueError("kind must be 'call' or 'put'")
    if strike < 0:
        raise ValueError("strike must be nonnegative")
    payoff = call(strike) if kind == "call" else put(strike)
    return expected_payoff(model, payoff, maturities, n_paths, src, workers)


def madan_yor_price(model: ProcessModel, K: float, T: float, barrier_list: Sequence[float],
                    n_paths: int, src: RandomSource, n_steps: int = 64,
                    workers=None) -> list[tuple[float, MCEstimate]]:
    """``E[(S_{T ^ T_n} - K)^+]`` for each barrier n, with ``T_n = inf{t: S_t >= n}``.

    Barrier crossings between grid points are detected with exact bridge
    probabilities (BES(3) bridge for the inverse Bessel, log-Brownian bridge
    for GBM).  One bridge uniform per step is shared by all barriers, so the
    hitting events are nested in n.
    """
    barriers = np.asarray(barrier_list, dtype=float)
    if barriers.ndim != 1 or barriers.size == 0 or np.any(np.diff(barriers) <= 0):
        raise ValueError("barriers must be a nonempty increasing list")
    if model.family not in (Family.INVERSE_BES3, Family.GBM):
        raise ValueError("Madan-Yor prices are implemented for inverse-bes3 and gbm")
    s0 = model.x0
    if barriers[0] <= max(s0, K):
        raise ValueError("barriers must exceed both S_0 and K")
    if not T > 0:
        raise ValueError("T must be positive")
    dt = T / n_steps
    sq = math.sqrt(dt)

    if model.family is Family.INVERSE_BES3:
        radii = 1.0 / barriers

        def kernel(streams):
            n = streams.n
            w = np.zeros((n, 3))
            w[:, 0] = 1.0 / s0
            r = np.full(n, 1.0 / s0)
            hit = np.zeros((n, barriers.size), dtype=bool)
            for _ in range(n_steps):
                u = streams.uniforms(4)
                w += sq * normals_from_uniforms(u[:, :3])
                r_new = np.sqrt(np.sum(w * w, axis=1))
                p = bes3_bridge_hit_prob(r[:, None], r_new[:, None], radii[None, :], dt)
                hit |= u[:, 3:4] < p
                r = r_new
            return {"s": 1.0 / r, "hit": hit}
    else:
        sigma = model.sigma
        logb = np.log(barriers)

        def kernel(streams):
            n = streams.n
            ls = np.full(n, math.log(s0))
            hit = np.zeros((n, barriers.size), dtype=bool)
            for _ in range(n_steps):
                u = streams.uniforms(2)
                new = ls + sigma * sq * normals_from_uniforms(u[:, 0]) - 0.5 * sigma * sigma * dt
                p = gbm_bridge_hit_prob(ls[:, None], new[:, None], logb[None, :], sigma, dt)
                hit |= u[:, 1:2] < p
                ls = new
            return {"s": np.exp(ls), "hit": hit}

    out = run_paths(kernel, n_paths, src, workers)
    s_T, hit = out["s"], out["hit"]
    rows = []
    for j, b in enumerate(barriers):
        stopped = np.where(hit[:, j], b, s_T)
        rows.append((float(b), mc_reduce(np.maximum(stopped - K, 0.0), src.seed)))
    return rows
