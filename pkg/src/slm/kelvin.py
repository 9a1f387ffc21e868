"""Kelvin transform in R^d (d >= 3) and the inversion of absorbed Brownian motion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from slm.core import MCEstimate, PathStreams, RandomSource, mc_reduce, run_paths
from slm.sde import bes3_bridge_hit_prob, normals_from_uniforms

__all__ = [
    "ScalarField",
    "invert_point",
    "kelvin_transform",
    "fd_laplacian",
    "laplacian_commutation_residual",
    "observed_order",
    "absorbed_ball_bm",
    "InversionCheck",
    "conformal_inversion_check",
    "inverted_coordinate_means",
    "inverted_covariation",
]


def _everywhere(y):
    return np.ones(np.shape(y)[:-1], dtype=bool)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """A real function on points of shape (..., d) with a validity predicate."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    d: int
    domain_guard: Callable[[np.ndarray], np.ndarray] = _everywhere

    def __post_init__(self):
        if self.d < 3:
            raise ValueError("dimension must be at least 3")

    def __call__(self, y):
        return self.evaluator(np.asarray(y, dtype=float))

    def valid(self, y) -> np.ndarray:
        return np.asarray(self.domain_guard(np.asarray(y, dtype=float)), dtype=bool)


def invert_point(x) -> np.ndarray:
    """``x / |x|^2`` along the last axis."""
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1, keepdims=True)
    if np.any(r2 == 0.0):
        raise ValueError("cannot invert the origin")
    return x / r2


def kelvin_transform(u: ScalarField) -> ScalarField:
    """``K[u](y) = |y|^{2-d} u(y / |y|^2)``."""
    d = u.d

    def ev(y):
        r = np.linalg.norm(y, axis=-1)
        return r ** (2 - d) * u(invert_point(y))

    def guard(y):
        nz = np.sum(y * y, axis=-1) > 0.0
        out = np.zeros(nz.shape, dtype=bool)
        out[nz] = u.valid(invert_point(y[nz]))
        return out

    return ScalarField(ev, d, guard)


def _stencil(y, h):
    d = y.shape[-1]
    offs = np.concatenate([np.zeros((1, d)), h * np.eye(d), -h * np.eye(d)])
    return y[None, :] + offs


def fd_laplacian(u: ScalarField, y, h: float) -> float:
    """Centered (2d+1)-point Laplacian of ``u`` at ``y``."""
    y = np.asarray(y, dtype=float)
    pts = _stencil(y, h)
    if not np.all(u.valid(pts)):
        raise ValueError("finite-difference stencil leaves the domain")
    vals = u(pts)
    d = y.size
    return float((np.sum(vals[1:]) - 2 * d * vals[0]) / (h * h))


def laplacian_commutation_residual(u: ScalarField, y, h_fd: float) -> float:
    """``|Delta K[u](y) - K[|x|^4 Delta u](y)|`` with both Laplacians by finite differences."""
    y = np.asarray(y, dtype=float)
    ku = kelvin_transform(u)
    lhs = fd_laplacian(ku, y, h_fd)
    ys = invert_point(y)
    if not np.all(u.valid(_stencil(ys, h_fd))):
        raise ValueError("finite-difference stencil leaves the domain")
    r = np.linalg.norm(y)
    rhs = r ** (2 - u.d) * np.sum(ys * ys) ** 2 * fd_laplacian(u, ys, h_fd)
    return abs(lhs - rhs)


def observed_order(residuals: Sequence[float], hs: Sequence[float]) -> float:
    """Least-squares slope of log residual against log h.

    Residuals that are exactly zero at every h give ``inf``; a mix of zero and
    nonzero residuals has no defined slope and raises ``ValueError``.
    """
    res = np.asarray(residuals, dtype=float)
    if np.all(res == 0.0):
        return math.inf
    if np.any(res <= 0.0):
        raise ValueError("residuals must all be positive to fit an order")
    return float(np.polyfit(np.log(hs), np.log(res), 1)[0])


# --------------------------------------------------------------------------
# Monte-Carlo side


def absorbed_ball_bm(x0, r: float, times: Sequence[float], n_steps: int, src: RandomSource,
                     n_paths: int, workers=None, increments: bool = False) -> dict:
    """d-dimensional BM from ``x0`` stopped on the sphere ``|x| = r``.

    The grid is uniform with ``n_steps`` steps up to ``max(times)``; each
    observation time must be a grid point.  Crossings between grid points are
    detected with the BES(3) bridge probability for the radius (approximate
    for d != 3) and the stopped position is the radial projection of the
    pre-step point.  With ``increments`` the per-path sums of
    ``dY(i) dY(j)`` of the inverted path ``Y = X/|X|^2`` are returned as well.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    if not 0.0 < r < np.linalg.norm(x0):
        raise ValueError("need 0 < r < |x0|")
    ts = np.atleast_1d(np.asarray(times, dtype=float))
    t_end = float(ts.max())
    dt = t_end / n_steps
    ks = np.rint(ts / dt).astype(np.int64)
    if np.any(np.abs(ks * dt - ts) > 1e-9 * max(1.0, t_end)):
        raise ValueError("observation times must lie on the uniform grid")
    sq = math.sqrt(dt)
    n_u = d + 1 + ((d + 1) % 2)

    def kernel(streams: PathStreams):
        n = streams.n
        x = np.tile(x0, (n, 1))
        rad = np.full(n, np.linalg.norm(x0))
        alive = np.ones(n, dtype=bool)
        obs = np.empty((n, ts.size, d))
        cov = np.zeros((n, ts.size, d, d)) if increments else None
        acc = np.zeros((n, d, d)) if increments else None
        y = invert_point(x)
        for j in np.flatnonzero(ks == 0):
            obs[:, j] = x
        for k in range(1, n_steps + 1):
            u = streams.uniforms(n_u)
            step = sq * normals_from_uniforms(u[:, :d])
            new = x + step
            new_rad = np.linalg.norm(new, axis=1)
            hit = alive & (u[:, d] < bes3_bridge_hit_prob(rad, new_rad, r, dt))
            move = alive & ~hit
            x = np.where(hit[:, None], x * (r / rad)[:, None], np.where(move[:, None], new, x))
            rad = np.where(move, new_rad, np.where(hit, r, rad))
            alive &= ~hit
            if increments:
                y_new = invert_point(x)
                dy = y_new - y
                acc += dy[:, :, None] * dy[:, None, :]
                y = y_new
            for j in np.flatnonzero(ks == k):
                obs[:, j] = x
                if increments:
                    cov[:, j] = acc
        out = {"obs": obs}
        if increments:
            out["cov"] = cov
        return out

    return run_paths(kernel, n_paths, src, workers)


class InversionCheck(NamedTuple):
    lhs: MCEstimate  # |x0|^{2-d} E^P U(X_t)
    rhs: MCEstimate  # E^P[phi_t |Y_t|^{2-d} U(Y_t / |Y_t|^2)], Y = inverted X
    weight: MCEstimate  # E^P[phi_t], equal to 1


def _default_steps(t):
    return max(1, int(math.ceil(t / 2e-3)))


def conformal_inversion_check(r: float, x0, U: Callable, t: float, n_paths: int,
                              src: RandomSource, d: int = 3, n_steps: int | None = None,
                              bounded: bool = True, workers=None) -> InversionCheck:
    """Both sides of the inversion identity for BM absorbed on a ball of radius ``r``.

    The right side is the expectation under the reweighted law of the
    inverted path, computed on the same P paths with the weight
    ``phi = |X_t|^{2-d} / |x0|^{2-d}``.
    """
    if d != 3:
        raise ValueError("the Monte-Carlo check is implemented for d = 3")
    if not 0.0 < r < 1.0:
        raise ValueError("r must lie in (0, 1)")
    if not bounded:
        raise ValueError("U must be bounded on the complement of the ball")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (d,) or abs(np.linalg.norm(x0) - 1.0) > 1e-12:
        raise ValueError("x0 must be a unit vector in R^3")
    n_steps = n_steps or _default_steps(t)
    x = absorbed_ball_bm(x0, r, [t], n_steps, src, n_paths, workers)["obs"][:, 0]
    n0 = np.linalg.norm(x0)
    rx = np.linalg.norm(x, axis=1)
    phi = rx ** (2 - d) / n0 ** (2 - d)
    y = invert_point(x)
    ry = np.linalg.norm(y, axis=1)
    lhs = mc_reduce(n0 ** (2 - d) * U(x), src.seed)
    rhs = mc_reduce(phi * ry ** (2 - d) * U(invert_point(y)), src.seed)
    return InversionCheck(lhs, rhs, mc_reduce(phi, src.seed))


def inverted_coordinate_means(r: float, x0, ts: Sequence[float], n_paths: int,
                              src: RandomSource, n_steps: int | None = None,
                              workers=None) -> list[tuple[float, list[MCEstimate]]]:
    """``E^P[phi_t Y_t(i)]`` for each coordinate i; constant in t under reweighting."""
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    n_steps = n_steps or _default_steps(ts.max())
    obs = absorbed_ball_bm(x0, r, ts, n_steps, src, n_paths, workers)["obs"]
    n0 = np.linalg.norm(x0)
    rows = []
    for j, t in enumerate(ts):
        x = obs[:, j]
        phi = np.linalg.norm(x, axis=1) ** (2 - d) / n0 ** (2 - d)
        y = invert_point(x)
        rows.append((float(t), [mc_reduce(phi * y[:, i], src.seed) for i in range(d)]))
    return rows


def inverted_covariation(r: float, x0, t: float, n_paths: int, src: RandomSource,
                         n_steps: int | None = None, workers=None) -> list[list[MCEstimate]]:
    """Reweighted realized covariations ``E^P[phi_t sum dY(i) dY(j)]`` over [0, t]."""
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    n_steps = n_steps or _default_steps(t)
    out = absorbed_ball_bm(x0, r, [t], n_steps, src, n_paths, workers, increments=True)
    x = out["obs"][:, 0]
    cov = out["cov"][:, 0]
    phi = np.linalg.norm(x, axis=1) ** (2 - d) / np.linalg.norm(x0) ** (2 - d)
    return [[mc_reduce(phi * cov[:, i, j], src.seed) for j in range(d)] for i in range(d)]
