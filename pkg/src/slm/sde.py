"""Exact-in-law simulators for the diffusions used throughout the package.

All simulators are vectorised over paths and driven by per-path Philox
streams, so a path's trajectory depends only on ``(seed, stream_id)`` and
never on how paths are split across workers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from slm import _rng
from slm.core import PathBatch, PathStreams, RandomSource, TimeGrid, run_paths
from slm.eigen import jacobi_eigvalsh

__all__ = [
    "Family",
    "ProcessModel",
    "normals_from_uniforms",
    "simulate_absorbed_bm",
    "simulate_free_bm",
    "simulate_bes3",
    "simulate_inverse_bes3",
    "simulate_besq",
    "simulate_gbm",
    "simulate_dyson",
    "simulate_spliced_bubble",
    "bes3_bridge_hit_prob",
    "gbm_bridge_hit_prob",
]


class Family(enum.Enum):
    BM_ABSORBED_AT_ZERO = "absorbed-bm"
    BM_FREE = "bm"
    BES3 = "bes3"
    INVERSE_BES3 = "inverse-bes3"
    BESQ = "besq"
    GBM = "gbm"
    DYSON = "dyson"
    SPLICED_BUBBLE = "spliced"


def normals_from_uniforms(u: np.ndarray) -> np.ndarray:
    """Inverse-CDF transform shared by every simulator."""
    u = np.ascontiguousarray(u, dtype=float)
    out = np.empty(u.size)
    _rng.ndtri_1d(u.ravel(), out)
    return out.reshape(u.shape)


def _observed(grid: TimeGrid, observe) -> np.ndarray:
    if observe is None:
        return np.arange(len(grid), dtype=np.int64)
    obs = np.unique(grid.indices_of(np.atleast_1d(observe)))
    return obs


def _drive(grid, observe, n_paths, src, workers, dim, init, advance, read,
           absorbed: Callable | None = None) -> PathBatch:
    """Shared stepping loop: record ``read(state)`` at observed grid indices."""
    obs = _observed(grid, observe)
    last = int(obs[-1])
    times = grid.times

    def kernel(streams: PathStreams):
        n = streams.n
        st = init(n)
        vals = np.empty((n, obs.size, dim))
        absorb = np.full(n, -1, dtype=np.int64)
        j = 0
        if obs[0] == 0:
            vals[:, 0, :] = read(st)
            j = 1
        for k in range(last):
            advance(st, k, times[k + 1] - times[k], streams)
            if absorbed is not None:
                newly = absorbed(st) & (absorb < 0)
                absorb[newly] = k + 1
            if j < obs.size and obs[j] == k + 1:
                vals[:, j, :] = read(st)
                j += 1
        return {"values": vals, "absorption_index": absorb}

    out = run_paths(kernel, n_paths, src, workers)
    return PathBatch(grid, obs, out["values"], out["absorption_index"],
                     seed=src.seed, first_stream=src.stream_id)


def _check_grid(grid: TimeGrid):
    if not isinstance(grid, TimeGrid):
        raise TypeError("grid must be a TimeGrid")
    if grid.times[0] != 0.0:
        raise ValueError("simulation grids start at time 0")


# --------------------------------------------------------------------------
# Brownian motion


def simulate_absorbed_bm(x0: float, grid: TimeGrid, src: RandomSource, n_paths: int = 1,
                         observe=None, workers=None) -> PathBatch:
    """Brownian motion from ``x0 > 0`` absorbed at 0.

    Between grid points the path is killed with the Brownian-bridge crossing
    probability ``exp(-2 x_k x_{k+1} / dt)``, which makes the absorbed process
    exact in law at grid times.  Each step uses one counter: a Gaussian
    increment and a bridge uniform.
    """
    if not x0 > 0:
        raise ValueError("x0 must be positive")
    _check_grid(grid)

    def init(n):
        return {"x": np.full(n, float(x0)), "dead": np.zeros(n, dtype=bool)}

    def advance(st, k, dt, streams):
        u = streams.uniforms(2)
        alive = ~st["dead"]
        x = st["x"][alive]
        g = normals_from_uniforms(u[alive, 0])
        y = x + math.sqrt(dt) * g
        with np.errstate(over="ignore"):
            cross = (y <= 0.0) | (u[alive, 1] < np.exp(-2.0 * x * np.maximum(y, 0.0) / dt))
        y[cross] = 0.0
        st["x"][alive] = y
        idx = np.flatnonzero(alive)
        st["dead"][idx[cross]] = True

    return _drive(grid, observe, n_paths, src, workers, 1, init, advance,
                  lambda st: st["x"][:, None], lambda st: st["dead"])


def simulate_free_bm(start: Sequence[float], grid: TimeGrid, src: RandomSource,
                     n_paths: int = 1, observe=None, workers=None) -> PathBatch:
    """Unconstrained d-dimensional Brownian motion from ``start``."""
    start = np.atleast_1d(np.asarray(start, dtype=float))
    d = start.size
    _check_grid(grid)

    def init(n):
        return {"w": np.tile(start, (n, 1))}

    def advance(st, k, dt, streams):
        st["w"] += math.sqrt(dt) * normals_from_uniforms(streams.uniforms(d))

    return _drive(grid, observe, n_paths, src, workers, d, init, advance,
                  lambda st: st["w"].copy())


# --------------------------------------------------------------------------
# Bessel(3) as the norm of 3-d Brownian motion


def bes3_bridge_hit_prob(x, y, a, dt):
    """P(BES(3) bridge from x to y over dt reaches level a), for a < min(x, y).

    Killed-Brownian-motion image densities; the h-transform factor cancels.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        e_xy = np.exp(-2.0 * x * y / dt)
        num = np.exp(-2.0 * (x - a) * (y - a) / dt) - e_xy
        p = num / (1.0 - e_xy)
    p = np.where((x <= a) | (y <= a), 1.0, p)
    return np.clip(np.nan_to_num(p, nan=1.0), 0.0, 1.0)


def _bes3_drive(x0, grid, src, n_paths, observe, workers, inverse):
    _check_grid(grid)

    def init(n):
        w = np.zeros((n, 3))
        w[:, 0] = x0
        return {"w": w}

    def advance(st, k, dt, streams):
        u = streams.uniforms(4)
        st["w"] += math.sqrt(dt) * normals_from_uniforms(u[:, :3])

    def read(st):
        r = np.sqrt(np.sum(st["w"] ** 2, axis=1))
        if inverse:
            with np.errstate(divide="ignore"):
                return (1.0 / r)[:, None]
        return r[:, None]

    return _drive(grid, observe, n_paths, src, workers, 1, init, advance, read)


def simulate_bes3(x0: float, grid: TimeGrid, src: RandomSource, n_paths: int = 1,
                  observe=None, workers=None) -> PathBatch:
    """BES(3) from ``x0 >= 0`` as the norm of 3-d Brownian motion from (x0, 0, 0)."""
    if x0 < 0:
        raise ValueError("x0 must be nonnegative")
    return _bes3_drive(float(x0), grid, src, n_paths, observe, workers, False)


def simulate_inverse_bes3(x0: float, grid: TimeGrid, src: RandomSource, n_paths: int = 1,
                          observe=None, workers=None) -> PathBatch:
    """Inverse Bessel process ``1 / BES(3)`` started at ``x0 > 0``."""
    if not x0 > 0:
        raise ValueError("x0 must be positive")
    return _bes3_drive(1.0 / x0, grid, src, n_paths, observe, workers, True)


# --------------------------------------------------------------------------
# Squared Bessel


def _besq_step(z, dt, delta, u_pois, u_gamma):
    """Exact BESQ^delta transition over ``dt``: 2 dt * Gamma(delta/2 + Poisson(z / 2dt))."""
    out = np.zeros_like(z)
    mu = z / (2.0 * dt)
    count = np.zeros_like(z)
    pos = mu > 0.0
    if np.any(pos):
        count[pos] = stats.poisson.ppf(u_pois[pos], mu[pos])
    shape = 0.5 * delta + count
    live = shape > 0.0
    if np.any(live):
        out[live] = 2.0 * dt * special.gammaincinv(shape[live], u_gamma[live])
    return out


def simulate_besq(delta, z: float, grid: TimeGrid, src: RandomSource, n_paths: int = 1,
                  observe=None, workers=None) -> PathBatch:
    """Squared Bessel process of dimension ``delta`` in {0, 4} from ``z >= 0``.

    ``delta`` may be a sequence, giving independent coordinates (all from
    ``z``) with their own dimensions.  Zero is absorbing for dimension 0; the
    batch records joint absorption (all coordinates at 0).
    """
    deltas = np.atleast_1d(np.asarray(delta, dtype=float))
    if not set(deltas.tolist()) <= {0.0, 4.0}:
        raise ValueError("supported BESQ dimensions are 0 and 4")
    if z < 0:
        raise ValueError("z must be nonnegative")
    _check_grid(grid)
    c = deltas.size

    def init(n):
        return {"z": np.full((n, c), float(z))}

    def advance(st, k, dt, streams):
        u = streams.uniforms(2 * c)
        for i in range(c):
            st["z"][:, i] = _besq_step(st["z"][:, i], dt, deltas[i], u[:, 2 * i], u[:, 2 * i + 1])

    absorbed = None
    if np.all(deltas == 0.0):
        absorbed = lambda st: np.all(st["z"] == 0.0, axis=1)  # noqa: E731
    return _drive(grid, observe, n_paths, src, workers, c, init, advance,
                  lambda st: st["z"].copy(), absorbed)


# --------------------------------------------------------------------------
# Geometric Brownian motion


def gbm_bridge_hit_prob(log_x, log_y, log_b, sigma, dt):
    """P(GBM bridge crosses the upper level exp(log_b)) given log endpoints below it."""
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * (log_b - log_x) * (log_b - log_y) / (sigma * sigma * dt))
    return np.where((log_x >= log_b) | (log_y >= log_b), 1.0, p)


def simulate_gbm(s0: float, sigma: float, grid: TimeGrid, src: RandomSource, n_paths: int = 1,
                 observe=None, workers=None) -> PathBatch:
    """Driftless geometric Brownian motion ``s0 exp(sigma W_t - sigma^2 t / 2)``."""
    if not s0 > 0 or not sigma > 0:
        raise ValueError("s0 and sigma must be positive")
    _check_grid(grid)

    def init(n):
        return {"log": np.full(n, math.log(s0))}

    def advance(st, k, dt, streams):
        g = normals_from_uniforms(streams.uniforms(2)[:, 0])
        st["log"] += sigma * math.sqrt(dt) * g - 0.5 * sigma * sigma * dt

    return _drive(grid, observe, n_paths, src, workers, 1, init, advance,
                  lambda st: np.exp(st["log"])[:, None])


# --------------------------------------------------------------------------
# Dyson Brownian motion


def simulate_dyson(start: Sequence[float], grid: TimeGrid, src: RandomSource, n_paths: int = 1,
                   observe=None, workers=None) -> PathBatch:
    """Ordered eigenvalues of ``diag(start) + M_t`` for a Hermitian Brownian matrix.

    Diagonal entries of ``M`` are real standard Brownian motions; above the
    diagonal ``M^R + i M^I`` with independent standard real parts.  Eigenvalues
    are taken with the cyclic Jacobi method at observed times.
    """
    start = np.asarray(start, dtype=float)
    n = start.size
    if not 2 <= n <= 8:
        raise ValueError("Dyson dimension must be between 2 and 8")
    if np.any(np.diff(start) <= 0):
        raise ValueError("start must be strictly increasing")
    _check_grid(grid)
    iu = np.triu_indices(n, 1)
    n_off = iu[0].size

    def init(m):
        h = np.zeros((m, n, n), dtype=complex)
        h[:, np.arange(n), np.arange(n)] = start
        return {"h": h}

    def advance(st, k, dt, streams):
        g = math.sqrt(dt) * normals_from_uniforms(streams.uniforms(n + 2 * n_off))
        h = st["h"]
        h[:, np.arange(n), np.arange(n)] += g[:, :n]
        off = g[:, n:n + n_off] + 1j * g[:, n + n_off:]
        h[:, iu[0], iu[1]] += off
        h[:, iu[1], iu[0]] += np.conj(off)

    return _drive(grid, observe, n_paths, src, workers, n, init, advance,
                  lambda st: jacobi_eigvalsh(st["h"]))


# --------------------------------------------------------------------------
# Spliced bubble


def simulate_spliced_bubble(grid: TimeGrid, src: RandomSource, s0: float = 1.0,
                            n_paths: int = 1, observe=None, workers=None) -> PathBatch:
    """Alternating exponential-BM and inverse-Bessel segments of unit length.

    On ``[2i, 2i+1)`` the path is ``S_{2i} exp(B - t/2)``; on ``[2i+1, 2i+2)`` it
    is ``S_{2i+1} / X`` with X a fresh BES(3) from 1.  Integer join times are
    inserted internally so segment boundaries are hit exactly.
    """
    if not s0 > 0:
        raise ValueError("s0 must be positive")
    _check_grid(grid)
    if grid.t_end < 2.0:
        raise ValueError("grid must span at least [0, 2)")
    joins = np.arange(1, math.ceil(grid.t_end))
    fine = grid.including(joins) if joins.size else grid
    obs_t = grid.times if observe is None else np.atleast_1d(observe)
    grid.indices_of(obs_t)
    times = fine.times

    def init(n):
        w = np.zeros((n, 3))
        w[:, 0] = 1.0
        return {"s": np.full(n, float(s0)), "anchor": np.full(n, float(s0)), "w": w}

    def advance(st, k, dt, streams):
        u = streams.uniforms(4)
        if int(math.floor(times[k] + 1e-12)) % 2 == 0:
            g = normals_from_uniforms(u[:, 0])
            st["s"] = st["s"] * np.exp(math.sqrt(dt) * g - 0.5 * dt)
        else:
            st["w"] += math.sqrt(dt) * normals_from_uniforms(u[:, :3])
            st["s"] = st["anchor"] / np.sqrt(np.sum(st["w"] ** 2, axis=1))
        t_next = times[k + 1]
        if abs(t_next - round(t_next)) < 1e-12:
            st["anchor"] = st["s"].copy()
            st["w"][:] = 0.0
            st["w"][:, 0] = 1.0

    batch = _drive(fine, obs_t, n_paths, src, workers, 1, init, advance,
                   lambda st: st["s"][:, None])
    return PathBatch(fine, batch.obs_index, batch.values, batch.absorption_index,
                     seed=batch.seed, first_stream=batch.first_stream)


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProcessModel:
    """A simulable diffusion family with its parameters.

    ``x0`` is the scalar start (BM, BES3, inverse BES3, BESQ ``z``, GBM and
    spliced ``s0``); ``start`` is the vector start for Dyson and free BM.
    """

    family: Family
    x0: float = 1.0
    delta: float | tuple = 0.0
    sigma: float = 1.0
    start: tuple = ()

    def __post_init__(self):
        f = Family(self.family)
        object.__setattr__(self, "family", f)
        if f is Family.BES3 and self.x0 < 0:
            raise ValueError("BES3 start must be >= 0")
        if f in (Family.INVERSE_BES3, Family.BM_ABSORBED_AT_ZERO, Family.GBM,
                 Family.SPLICED_BUBBLE) and not self.x0 > 0:
            raise ValueError(f"{f.value} start must be > 0")
        if f is Family.BESQ and self.x0 < 0:
            raise ValueError("BESQ start must be >= 0")
        if f is Family.DYSON:
            s = np.asarray(self.start, dtype=float)
            if s.size < 2 or np.any(np.diff(s) <= 0):
                raise ValueError("Dyson start must be strictly increasing")

    @classmethod
    def absorbed_bm(cls, x0=1.0):
        return cls(Family.BM_ABSORBED_AT_ZERO, x0=x0)

    @classmethod
    def free_bm(cls, start=(0.0,)):
        return cls(Family.BM_FREE, start=tuple(start))

    @classmethod
    def bes3(cls, x0=1.0):
        return cls(Family.BES3, x0=x0)

    @classmethod
    def inverse_bes3(cls, x0=1.0):
        return cls(Family.INVERSE_BES3, x0=x0)

    @classmethod
    def besq(cls, delta=0, z=1.0):
        return cls(Family.BESQ, x0=z, delta=delta if np.isscalar(delta) else tuple(delta))

    @classmethod
    def gbm(cls, s0=1.0, sigma=1.0):
        return cls(Family.GBM, x0=s0, sigma=sigma)

    @classmethod
    def dyson(cls, start):
        return cls(Family.DYSON, start=tuple(start))

    @classmethod
    def spliced(cls, s0=1.0):
        return cls(Family.SPLICED_BUBBLE, x0=s0)

    @property
    def dim(self) -> int:
        if self.family in (Family.DYSON, Family.BM_FREE):
            return len(self.start)
        if self.family is Family.BESQ:
            return int(np.atleast_1d(self.delta).size)
        return 1

    def simulate(self, grid: TimeGrid, src: RandomSource, n_paths: int = 1, observe=None,
                 workers=None) -> PathBatch:
        f = self.family
        if f is Family.BM_ABSORBED_AT_ZERO:
            return simulate_absorbed_bm(self.x0, grid, src, n_paths, observe, workers)
        if f is Family.BM_FREE:
            return simulate_free_bm(self.start, grid, src, n_paths, observe, workers)
        if f is Family.BES3:
            return simulate_bes3(self.x0, grid, src, n_paths, observe, workers)
        if f is Family.INVERSE_BES3:
            return simulate_inverse_bes3(self.x0, grid, src, n_paths, observe, workers)
        if f is Family.BESQ:
            return simulate_besq(self.delta, self.x0, grid, src, n_paths, observe, workers)
        if f is Family.GBM:
            return simulate_gbm(self.x0, self.sigma, grid, src, n_paths, observe, workers)
        if f is Family.DYSON:
            return simulate_dyson(self.start, grid, src, n_paths, observe, workers)
        return simulate_spliced_bubble(grid, src, self.x0, n_paths, observe, workers)
