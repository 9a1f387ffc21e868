"""Three families of strict local martingales as runnable experiments.

* size-biased sampling of independent BESQ(0) processes,
* Vandermonde ratios of Dyson Brownian motion,
* planar Brownian motion conditioned to leave the unit disc through an arc.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numba as nb
import numpy as np
from scipy import integrate

from slm import _rng
from slm.core import (DiagnosticsError, MCEstimate, PathStreams, RandomSource, TimeGrid,
                      grid_from_times, mc_reduce, run_paths)
from slm.sde import simulate_besq, simulate_dyson, simulate_free_bm

__all__ = [
    "DiscArc",
    "SizeBiasedConfig",
    "ratio_martingale_check",
    "SizeBiasedRow",
    "size_biased_expectations",
    "vandermonde",
    "vandermonde_matrix",
    "vandermonde_inverse",
    "vandermonde_inverse_last_row",
    "dyson_ratio_expectation",
    "vandermonde_bm_control",
    "disc_harmonic_measure",
    "harmonic_measure_closed",
    "simulate_disc_bm",
    "DiscRun",
    "disc_exit_frequencies",
    "ExitComparison",
    "conditioned_exit_expectation",
    "conditioned_exit_curve",
]

TWO_PI = 2.0 * math.pi


# --------------------------------------------------------------------------
# Size-biased BESQ(0)


@dataclass(frozen=True, eq=False)
class SizeBiasedConfig:
    n: int
    z: float
    t_grid: TimeGrid

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError("n must be an integer >= 2")
        if not self.z > 0:
            raise ValueError("z must be positive")
        if not isinstance(self.t_grid, TimeGrid):
            object.__setattr__(self, "t_grid", grid_from_times(self.t_grid, include_zero=False))


def _besq_q_paths(cfg: SizeBiasedConfig, n_paths, src, workers, deltas=None):
    ts = cfg.t_grid.times
    deltas = [0.0] * cfg.n if deltas is None else deltas
    grid = grid_from_times(ts)
    batch = simulate_besq(deltas, cfg.z, grid, src, n_paths, observe=ts, workers=workers)
    return ts, np.stack([batch.at(t) for t in ts], axis=1)  # (paths, times, n)


def ratio_martingale_check(cfg: SizeBiasedConfig, n_paths: int, src: RandomSource,
                           workers=None) -> list[tuple[float, MCEstimate]]:
    """``E^Q[Z_t(1) / zeta_t]`` on the grid for iid BESQ(0) coordinates.

    Once every coordinate is absorbed the ratio is frozen at its value on the
    previous grid time (``1/n`` before the first grid time).
    """
    ts, z = _besq_q_paths(cfg, n_paths, src, workers)
    zeta = z.sum(axis=2)
    ratio = np.empty(zeta.shape)
    last = np.full(n_paths, 1.0 / cfg.n)
    for k in range(ts.size):
        live = zeta[:, k] > 0.0
        last = np.where(live, z[:, k, 0] / np.where(live, zeta[:, k], 1.0), last)
        ratio[:, k] = last
    return [(float(t), mc_reduce(ratio[:, k], src.seed)) for k, t in enumerate(ts)]


class SizeBiasedRow(NamedTuple):
    t: float
    N: MCEstimate  # zeta^2 / Z(1)
    U: MCEstimate  # Z(2) zeta / Z(1)
    V: MCEstimate  # (zeta / Z(1)) prod_{i>=2} Z(i)
    M: MCEstimate  # zeta prod_{i>=2} Z(i)


def _size_biased_relabel(z, u):
    """Move a coordinate chosen with probability Z(i)/zeta into slot 0."""
    n = z.shape[1]
    zeta = z.sum(axis=1)
    live = zeta > 0.0
    cum = np.cumsum(z, axis=1) / np.where(live, zeta, 1.0)[:, None]
    pick = np.minimum(np.sum(cum < u[:, None], axis=1), n - 1)
    # all-zero rows carry no mass; any label works
    pick = np.where(live, pick, np.minimum((u * n).astype(np.int64), n - 1))
    order = np.argsort(np.arange(n)[None, :] != pick[:, None], axis=1, kind="stable")
    return np.take_along_axis(z, order, axis=1)


def size_biased_expectations(cfg: SizeBiasedConfig, n_paths: int, src: RandomSource,
                             workers=None, method: str = "resample") -> list[SizeBiasedRow]:
    """``E^P`` of N, U, V and M on the grid under the size-biased law.

    ``method="resample"`` samples the size-biased law exactly: iid BESQ(0)
    paths under Q, then at each reported time one coordinate is promoted to
    label 1 with probability proportional to its current value.
    ``method="spine"`` instead simulates label 1 as BESQ(4) and the others as
    BESQ(0); that law has density ``Z_t(1)/z`` rather than ``n Z_t(1)/zeta_t``
    and is kept as a contrast.  All four functionals vanish when every
    coordinate is absorbed.
    """
    if method == "resample":
        ts, z = _besq_q_paths(cfg, n_paths, src.batch(0), workers)
        draws = run_paths(lambda s: {"u": s.uniforms(ts.size)}, n_paths, src.batch(1), workers)
        z = np.stack([_size_biased_relabel(z[:, k], draws["u"][:, k]) for k in range(ts.size)],
                     axis=1)
    elif method == "spine":
        ts, z = _besq_q_paths(cfg, n_paths, src, workers, deltas=[4.0] + [0.0] * (cfg.n - 1))
    else:
        raise ValueError("method must be 'resample' or 'spine'")
    rows = []
    for k, t in enumerate(ts):
        zk = z[:, k]
        z1 = zk[:, 0]
        zeta = zk.sum(axis=1)
        rest = np.prod(zk[:, 1:], axis=1)
        pos = z1 > 0.0
        inv1 = np.where(pos, 1.0 / np.where(pos, z1, 1.0), 0.0)
        vals = (zeta * zeta * inv1, zk[:, 1] * zeta * inv1, zeta * inv1 * rest, zeta * rest)
        rows.append(SizeBiasedRow(float(t), *(mc_reduce(v, src.seed) for v in vals)))
    return rows


# --------------------------------------------------------------------------
# Vandermonde and Dyson


def vandermonde(x) -> np.ndarray | float:
    """``prod_{i<j} (x(j) - x(i))`` along the last axis; the empty product is 1."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    out = np.ones(x.shape[:-1])
    for i in range(n):
        for j in range(i + 1, n):
            out = out * (x[..., j] - x[..., i])
    return float(out) if out.ndim == 0 else out


def vandermonde_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., :, None] ** np.arange(x.shape[-1])


def vandermonde_inverse(x) -> np.ndarray:
    """Inverse of the Vandermonde matrix by the adjugate, ``det A = vandermonde(x)``."""
    a = vandermonde_matrix(x)
    n = a.shape[-1]
    det = np.asarray(vandermonde(x))
    if np.any(det == 0.0):
        raise ValueError("repeated nodes: Vandermonde matrix is singular")
    inv = np.empty(a.shape)
    rows = np.arange(n)
    for i in range(n):
        for j in range(n):
            minor = a[..., rows != i, :][..., rows != j]
            inv[..., j, i] = (-1) ** (i + j) * np.linalg.det(minor)
    return inv / det[..., None, None]


def vandermonde_inverse_last_row(x) -> np.ndarray:
    """``A^{-1}(n, i)`` for i = 1..n, as Vandermonde minors over the full determinant."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    det = np.asarray(vandermonde(x))
    cols = np.arange(n)
    out = np.stack([(-1) ** (i + n - 1) * np.asarray(vandermonde(x[..., cols != i]))
                    for i in range(n)], axis=-1)
    return out / det[..., None]


def _check_ordered(start, n):
    start = np.asarray(start, dtype=float)
    if start.shape != (n,):
        raise ValueError(f"start must have length {n}")
    if np.any(np.diff(start) <= 0):
        raise ValueError("start must be strictly increasing")
    return start


def dyson_ratio_expectation(m: int, n: int, start: Sequence[float], t_grid, n_paths: int,
                            src: RandomSource, workers=None, mode: str = "ratio",
                            row: int | None = None) -> list[tuple[float, MCEstimate]]:
    """``E[Delta_m(lambda_t) / Delta_n(lambda_t)]`` along the grid for Dyson BM.

    ``mode="inverse"`` returns ``E|A_t^{-1}(n, row)|`` (1-based ``row``) for the
    Vandermonde matrix of the eigenvalues instead.
    """
    if not 1 <= m < n <= 8:
        raise ValueError("need 1 <= m < n <= 8")
    start = _check_ordered(start, n)
    ts = np.atleast_1d(getattr(t_grid, "times", t_grid)).astype(float)
    ts = ts[ts > 0]
    batch = simulate_dyson(start, grid_from_times(ts), src, n_paths, observe=ts, workers=workers)
    rows = []
    for t in ts:
        lam = batch.at(t)
        if mode == "ratio":
            vals = np.asarray(vandermonde(lam[:, :m])) / np.asarray(vandermonde(lam))
        elif mode == "inverse":
            if row is None or not 1 <= row <= n:
                raise ValueError("row must be in 1..n")
            vals = np.abs(vandermonde_inverse_last_row(lam)[:, row - 1])
        else:
            raise ValueError("mode must be 'ratio' or 'inverse'")
        rows.append((float(t), mc_reduce(vals, src.seed)))
    return rows


def vandermonde_bm_control(start: Sequence[float], t_grid, n_paths: int, src: RandomSource,
                           workers=None) -> list[tuple[float, MCEstimate]]:
    """``E[Delta_n(W_t)]`` for plain Brownian motion from ``start`` (a true martingale)."""
    start = np.asarray(start, dtype=float)
    ts = np.atleast_1d(getattr(t_grid, "times", t_grid)).astype(float)
    ts = ts[ts > 0]
    batch = simulate_free_bm(start, grid_from_times(ts), src, n_paths, observe=ts,
                             workers=workers)
    return [(float(t), mc_reduce(vandermonde(batch.at(t)), src.seed)) for t in ts]


# --------------------------------------------------------------------------
# Unit disc


@dataclass(frozen=True)
class DiscArc:
    """Boundary arc ``{e^{i theta}: theta_lo <= theta <= theta_hi}``."""

    theta_lo: float
    theta_hi: float

    def __post_init__(self):
        if not 0.0 <= self.theta_lo < self.theta_hi <= TWO_PI + 1e-15:
            raise ValueError("need 0 <= theta_lo < theta_hi <= 2 pi")

    @property
    def length(self) -> float:
        return self.theta_hi - self.theta_lo

    def contains(self, theta) -> np.ndarray:
        th = np.mod(theta, TWO_PI)
        return (th >= self.theta_lo) & (th <= self.theta_hi)

    def disjoint(self, other: DiscArc) -> bool:
        return self.theta_hi <= other.theta_lo or other.theta_hi <= self.theta_lo


def _point(x0) -> complex:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (2,):
        raise ValueError("x0 must be a point in the plane")
    z = complex(x0[0], x0[1])
    if not abs(z) < 1.0:
        raise ValueError("x0 must lie inside the unit disc")
    return z


def disc_harmonic_measure(x0, arc: DiscArc, tol: float = 1e-10) -> float:
    """Harmonic measure of ``arc`` seen from ``x0``: the Poisson-kernel integral."""
    z = _point(x0)
    r2 = abs(z) ** 2

    def kernel(th):
        return (1.0 - r2) / (TWO_PI * abs(complex(math.cos(th), math.sin(th)) - z) ** 2)

    # the kernel peaks at arg(z) with width about 1 - |z|
    peak = math.atan2(z.imag, z.real) % TWO_PI
    pts = [peak] if arc.theta_lo < peak < arc.theta_hi else None
    val, err = integrate.quad(kernel, arc.theta_lo, arc.theta_hi, epsabs=tol * 1e-2,
                              epsrel=tol, limit=500, points=pts)
    if not err <= tol:
        raise DiagnosticsError(f"Poisson integral error estimate {err:.2e} exceeds {tol:.0e}")
    return min(max(val, 0.0), 1.0)


def harmonic_measure_closed(points, arc: DiscArc) -> np.ndarray:
    """Vectorised closed form of :func:`disc_harmonic_measure` for points of shape (..., 2).

    ``omega(z) = arg((e^{ib} - z) / (e^{ia} - z)) / pi - (b - a) / (2 pi)`` with
    the argument taken in [0, 2 pi).
    """
    p = np.asarray(points, dtype=float)
    z = p[..., 0] + 1j * p[..., 1]
    ea, eb = np.exp(1j * arc.theta_lo), np.exp(1j * arc.theta_hi)
    ang = np.mod(np.angle((eb - z) / (ea - z)), TWO_PI)
    return np.clip(ang / math.pi - arc.length / TWO_PI, 0.0, 1.0)


@nb.njit(nogil=True, cache=True)
def _disc_kernel(seed, streams, x0, y0, dt, n_steps, obs_steps, out_obs, exit_theta,
                 exit_step):
    """Euler steps of planar BM killed on the unit circle.

    Counters 2k and 2k+1 of each stream drive step k: two Gaussians and a
    bridge uniform (the fourth uniform is unused).  A step that ends outside
    exits at the segment/circle intersection; one that stays inside exits
    with the tangent half-plane bridge probability exp(-2 d0 d1 / dt), at the
    angle of the step midpoint.
    """
    sq = math.sqrt(dt)
    n_obs = obs_steps.shape[0]
    for p in range(streams.shape[0]):
        s = streams[p]
        x, y = x0, y0
        exit_step[p] = -1
        exit_theta[p] = np.nan
        j = 0
        while j < n_obs and obs_steps[j] == 0:
            out_obs[p, j, 0] = x
            out_obs[p, j, 1] = y
            j += 1
        for k in range(1, n_steps + 1):
            u0, u1 = _rng.uniform_pair(seed, s, 2 * (k - 1))
            u2, _ = _rng.uniform_pair(seed, s, 2 * (k - 1) + 1)
            nx = x + sq * _rng.ndtri(u0)
            ny = y + sq * _rng.ndtri(u1)
            r1 = math.sqrt(nx * nx + ny * ny)
            if r1 >= 1.0:
                dx, dy = nx - x, ny - y
                a = dx * dx + dy * dy
                b = x * dx + y * dy
                c = x * x + y * y - 1.0
                lam = (-b + math.sqrt(max(b * b - a * c, 0.0))) / a
                exit_theta[p] = math.atan2(y + lam * dy, x + lam * dx)
                exit_step[p] = k
            else:
                d0 = 1.0 - math.sqrt(x * x + y * y)
                d1 = 1.0 - r1
                if u2 < math.exp(-2.0 * d0 * d1 / dt):
                    exit_theta[p] = math.atan2(0.5 * (y + ny), 0.5 * (x + nx))
                    exit_step[p] = k
            if exit_step[p] >= 0:
                ex, ey = math.cos(exit_theta[p]), math.sin(exit_theta[p])
                while j < n_obs:
                    out_obs[p, j, 0] = ex
                    out_obs[p, j, 1] = ey
                    j += 1
                break
            x, y = nx, ny
            while j < n_obs and obs_steps[j] == k:
                out_obs[p, j, 0] = x
                out_obs[p, j, 1] = y
                j += 1
        if exit_theta[p] < 0.0:
            exit_theta[p] += 2.0 * math.pi


class DiscRun(NamedTuple):
    times: np.ndarray
    states: np.ndarray  # (paths, times, 2); exit point after exit
    exit_theta: np.ndarray  # nan if still inside at the end
    exit_time: np.ndarray  # inf if still inside at the end


def simulate_disc_bm(x0, obs_times: Sequence[float], src: RandomSource, n_paths: int,
                     t_max: float | None = None, dt: float = 1e-3, workers=None) -> DiscRun:
    """Planar BM from ``x0`` absorbed on the unit circle, recorded at ``obs_times``.

    Runs until ``t_max`` (default: the last observation time).  Observation
    times must be multiples of ``dt``.
    """
    z = _point(x0)
    if not 0.0 < dt <= 1e-3:
        raise ValueError("dt must lie in (0, 1e-3]")
    ts = np.atleast_1d(np.asarray(obs_times, dtype=float))
    ks = np.rint(ts / dt).astype(np.int64)
    if np.any(ts < 0) or np.any(np.abs(ks * dt - ts) > 1e-9 * np.maximum(1.0, ts)):
        raise ValueError("observation times must be nonnegative multiples of dt")
    order = np.argsort(ks, kind="stable")
    t_max = float(ts.max()) if t_max is None else float(t_max)
    n_steps = max(int(math.ceil(t_max / dt - 1e-9)), int(ks.max()))

    def kernel(streams: PathStreams):
        n = streams.n
        obs = np.empty((n, ks.size, 2))
        th = np.empty(n)
        st = np.empty(n, dtype=np.int64)
        _disc_kernel(streams.seed, streams.streams, z.real, z.imag, dt, n_steps, ks[order],
                     obs, th, st)
        back = np.empty_like(obs)
        back[:, order] = obs
        return {"obs": back, "theta": th, "step": st}

    out = run_paths(kernel, n_paths, src, workers)
    step = out["step"]
    exit_time = np.where(step >= 0, step * dt, np.inf)
    return DiscRun(ts, out["obs"], out["theta"], exit_time)


def disc_exit_frequencies(x0, arcs: Sequence[DiscArc], n_paths: int, src: RandomSource,
                          t_max: float = 30.0, dt: float = 1e-3,
                          workers=None) -> list[MCEstimate]:
    """MC frequencies of leaving the disc through each arc."""
    run = simulate_disc_bm(x0, [0.0], src, n_paths, t_max=t_max, dt=dt, workers=workers)
    if np.any(np.isnan(run.exit_theta)):
        raise DiagnosticsError(f"{np.isnan(run.exit_theta).sum()} paths still inside at t_max")
    return [mc_reduce(arc.contains(run.exit_theta), src.seed) for arc in arcs]


class ExitComparison(NamedTuple):
    t: float
    via_rejection: MCEstimate
    via_ptoq: MCEstimate


def conditioned_exit_curve(x0, B1: DiscArc, u_arc: DiscArc, ts: Sequence[float], n_paths: int,
                           src: RandomSource, t_max: float = 30.0, dt: float = 1e-3,
                           workers=None) -> list[ExitComparison]:
    """``E^P[f(X_{t ^ tau}) / v(X_{t ^ tau})]`` for BM conditioned to exit through ``B1``.

    ``v`` is the harmonic measure of ``B1`` and ``f`` that of ``u_arc``.
    Rejection: Q paths from batch 0 run to exit, those leaving through ``B1``
    are kept.  Change of measure: Q paths from batch 1 up to the largest t,
    averaging ``f(X_{t ^ tau}) 1{h_t > 0} / v(x0)``.
    """
    if not B1.disjoint(u_arc):
        raise ValueError("B1 and the arc carrying u must be disjoint")
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    v0 = float(harmonic_measure_closed(np.asarray(x0, dtype=float), B1))
    if v0 <= 0.0:
        raise DiagnosticsError("exit through B1 has zero probability")

    rej = simulate_disc_bm(x0, ts, src.batch(0), n_paths, t_max=max(t_max, ts.max()), dt=dt,
                           workers=workers)
    if np.any(np.isnan(rej.exit_theta)):
        raise DiagnosticsError(f"{np.isnan(rej.exit_theta).sum()} paths still inside at t_max")
    keep = B1.contains(rej.exit_theta)
    if not keep.any():
        raise DiagnosticsError("no path exited through B1")

    fwd = simulate_disc_bm(x0, ts, src.batch(1), n_paths, dt=dt, workers=workers)
    out = []
    for k, t in enumerate(ts):
        xs = rej.states[keep, k]
        done = rej.exit_time[keep] <= t
        f = np.where(done, 0.0, harmonic_measure_closed(xs, u_arc))
        v = np.where(done, 1.0, harmonic_measure_closed(xs, B1))
        ratio = np.where(v > 0.0, f / np.where(v > 0.0, v, 1.0), 0.0)
        a = mc_reduce(ratio, src.seed)

        ys = fwd.states[:, k]
        exited = fwd.exit_time <= t
        th = fwd.exit_theta
        f_q = np.where(exited, u_arc.contains(th).astype(float), harmonic_measure_closed(ys, u_arc))
        alive = ~exited | B1.contains(th)
        b = mc_reduce(np.where(alive, f_q, 0.0) / v0, src.seed)
        out.append(ExitComparison(float(t), a, b))
    return out


def conditioned_exit_expectation(x0, B1: DiscArc, u_arc: DiscArc, t: float, n_paths: int,
                                 src: RandomSource, workers=None) -> tuple[MCEstimate, MCEstimate]:
    row = conditioned_exit_curve(x0, B1, u_arc, [t], n_paths, src, workers=workers)[0]
    return row.via_rejection, row.via_ptoq
