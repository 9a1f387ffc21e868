"""Shared numeric types, time grids, random streams and deterministic reduction."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from slm import _rng

__all__ = [
    "TimeGrid",
    "AbsorbedPath",
    "PathBatch",
    "MCEstimate",
    "RandomSource",
    "PathStreams",
    "make_grid",
    "grid_from_times",
    "standard_gaussian",
    "mc_reduce",
    "run_paths",
    "joint_z",
    "resolve_workers",
    "DiagnosticsError",
]

_U64 = 1 << 64
BATCH_STRIDE = 1 << 32  # stream-id gap between independent path batches
CHUNK_PATHS = 4096  # fixed work unit; results do not depend on it
BLOCK = 1024  # leaf size of the pairwise summation tree
GRID_TOL = 1e-12


class DiagnosticsError(RuntimeError):
    """A numerical procedure ran but its output cannot be trusted."""


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing sampling times; ``step`` is set for uniform grids."""

    times: np.ndarray
    step: float | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("times must be a nonempty 1-d sequence")
        if times[0] < 0:
            raise ValueError("times[0] must be nonnegative")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.step is not None:
            if self.step <= 0:
                raise ValueError("step must be positive")
            if np.any(np.abs(np.diff(times) - self.step) > GRID_TOL * max(1.0, self.step)):
                raise ValueError("times are not spaced by step")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    def __len__(self):
        return self.times.size

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def index_of(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t - GRID_TOL * max(1.0, abs(t))))
        if k >= self.times.size or abs(self.times[k] - t) > GRID_TOL * max(1.0, abs(t)):
            raise ValueError(f"time {t!r} is not a grid point")
        return k

    def indices_of(self, ts: Sequence[float]) -> np.ndarray:
        return np.array([self.index_of(t) for t in ts], dtype=np.int64)

    def refine(self, max_step: float) -> TimeGrid:
        """Insert equally spaced points so no gap exceeds ``max_step``."""
        pts = [self.times[:1]]
        for a, b in zip(self.times[:-1], self.times[1:]):
            n = max(1, math.ceil((b - a) / max_step - 1e-9))
            seg = a + (b - a) * np.arange(1, n + 1) / n
            seg[-1] = b
            pts.append(seg)
        return TimeGrid(np.concatenate(pts))

    def including(self, ts: Sequence[float]) -> TimeGrid:
        merged = np.union1d(self.times, np.asarray(ts, dtype=float))
        keep = np.concatenate([[True], np.diff(merged) > GRID_TOL * np.maximum(1.0, merged[1:])])
        return TimeGrid(merged[keep])


def make_grid(t_end: float, n_steps: int) -> TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_n = t_end`` with an exact endpoint."""
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError("n_steps must be a positive integer")
    n_steps = int(n_steps)
    step = t_end / n_steps
    times = np.arange(n_steps + 1) * step
    times[-1] = t_end
    return TimeGrid(times, step)


def grid_from_times(times: Sequence[float], include_zero: bool = True) -> TimeGrid:
    ts = np.asarray(sorted(set(float(t) for t in times)))
    if include_zero and (ts.size == 0 or ts[0] > 0):
        ts = np.concatenate([[0.0], ts])
    return TimeGrid(ts)


@dataclass(frozen=True, eq=False)
class AbsorbedPath:
    """One sampled trajectory with its absorption index (``None``: not absorbed)."""

    grid: TimeGrid
    values: np.ndarray
    absorption_index: int | None = None
    absorption_state: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != len(self.grid):
            raise ValueError("one state vector per grid time is required")
        object.__setattr__(self, "values", values)
        if self.absorption_index is not None:
            if self.absorption_state is None:
                object.__setattr__(self, "absorption_state", values[self.absorption_index].copy())
            if not np.all(values[self.absorption_index:] == self.absorption_state):
                raise ValueError("path moves after absorption")


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Many independent paths sampled at ``grid.times[obs_index]``.

    ``values`` has shape ``(n_paths, n_obs, dim)``.  ``absorption_index`` is an
    index into the full simulation grid, -1 when the path is not absorbed
    within the horizon.
    """

    grid: TimeGrid
    obs_index: np.ndarray
    values: np.ndarray
    absorption_index: np.ndarray
    seed: int = 0
    first_stream: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[self.obs_index]

    def __len__(self):
        return self.n_paths

    def at(self, t: float) -> np.ndarray:
        """States at time ``t``, shape ``(n_paths, dim)``."""
        k = self.grid.index_of(t)
        j = np.flatnonzero(self.obs_index == k)
        if j.size == 0:
            raise ValueError(f"time {t!r} was not recorded")
        return self.values[:, j[0], :]

    def absorbed_by(self, t: float) -> np.ndarray:
        k = self.grid.index_of(t)
        return (self.absorption_index >= 0) & (self.absorption_index <= k)

    def path(self, i: int) -> AbsorbedPath:
        sub = TimeGrid(self.times)
        a = int(self.absorption_index[i])
        idx = None
        if a >= 0:
            after = np.flatnonzero(self.obs_index >= a)
            idx = int(after[0]) if after.size else None
        return AbsorbedPath(sub, self.values[i], idx)

    def __iter__(self) -> Iterator[AbsorbedPath]:
        for i in range(self.n_paths):
            yield self.path(i)


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int
    seed: int

    def __str__(self):
        return f"{self.mean:.6g} ± {self.stderr:.2g} (n={self.n_paths})"


def joint_z(a: MCEstimate, b: MCEstimate | float) -> float:
    """(a - b) in units of the joint standard error of independent estimates."""
    if isinstance(b, MCEstimate):
        diff, se = a.mean - b.mean, math.hypot(a.stderr, b.stderr)
    else:
        diff, se = a.mean - float(b), a.stderr
    if se == 0.0:
        return 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    return diff / se


class RandomSource:
    """A single Philox stream identified by ``(seed, stream_id)``.

    The instance carries a draw cursor, so it should be owned by one
    consumer.  ``batch(j)`` and ``spawn(k)`` give fresh sources; the output of
    any source depends only on its two identifiers.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if int(seed) != seed:
            raise TypeError("seed must be an integer")
        self.seed = int(seed) % _U64
        self.stream_id = int(stream_id) % _U64
        self._counter = 0

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, stream_id={self.stream_id})"

    def spawn(self, k: int) -> RandomSource:
        return RandomSource(self.seed, self.stream_id + k)

    def batch(self, j: int) -> RandomSource:
        """Base source for the j-th independent batch of paths."""
        return RandomSource(self.seed, self.stream_id + j * BATCH_STRIDE)

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty((1, n))
        _rng.fill_uniforms(np.uint64(self.seed), np.array([self.stream_id], dtype=np.uint64),
                           self._counter, out)
        self._counter += (n + 1) // 2
        return out[0]

    def normals(self, n: int) -> np.ndarray:
        out = np.empty((1, n))
        _rng.fill_normals(np.uint64(self.seed), np.array([self.stream_id], dtype=np.uint64),
                          self._counter, out)
        self._counter += (n + 1) // 2
        return out[0]


def standard_gaussian(src: RandomSource) -> float:
    """Next N(0, 1) draw of ``src`` by inversion of one uniform."""
    return float(src.normals(1)[0])


class PathStreams:
    """Vectorised view of the consecutive streams ``first, ..., first + n - 1``.

    Every call consumes the same number of counters on all streams, whether or
    not a subset of rows is requested, so draw alignment never depends on which
    paths are still alive.
    """

    def __init__(self, seed: int, first_stream: int, n: int):
        self.seed = np.uint64(seed % _U64)
        self.first_stream = first_stream % _U64
        self.n = n
        self.streams = (np.uint64(self.first_stream) + np.arange(n, dtype=np.uint64))
        self.counter = 0

    def _draw(self, fill, m: int, rows) -> np.ndarray:
        streams = self.streams if rows is None else self.streams[rows]
        out = np.empty((streams.size, m))
        fill(self.seed, streams, self.counter, out)
        self.counter += (m + 1) // 2
        return out

    def uniforms(self, m: int, rows=None) -> np.ndarray:
        return self._draw(_rng.fill_uniforms, m, rows)

    def normals(self, m: int, rows=None) -> np.ndarray:
        return self._draw(_rng.fill_normals, m, rows)

    def skip(self, m: int) -> None:
        self.counter += (m + 1) // 2


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get("SLM_WORKERS", "1") or 1)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def run_paths(kernel: Callable[[PathStreams], dict], n_paths: int, src: RandomSource,
              workers: int | None = None) -> dict:
    """Run ``kernel`` over fixed chunks of paths and concatenate in path order.

    ``kernel`` receives a :class:`PathStreams` and returns a dict of arrays whose
    first axis runs over the chunk's paths.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    starts = list(range(0, n_paths, CHUNK_PATHS))

    def one(start):
        size = min(CHUNK_PATHS, n_paths - start)
        return kernel(PathStreams(src.seed, src.stream_id + start, size))

    workers = resolve_workers(workers)
    if workers == 1 or len(starts) == 1:
        parts = [one(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, starts))
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


def _block_sums(x: np.ndarray) -> np.ndarray:
    pad = (-x.size) % BLOCK
    if pad:
        x = np.concatenate([x, np.zeros(pad)])
    # cumsum is strictly sequential along the row
    return np.cumsum(x.reshape(-1, BLOCK), axis=1)[:, -1]


def _tree_sum(x: np.ndarray) -> float:
    s = _block_sums(x)
    while s.size > 1:
        if s.size % 2:
            s = np.concatenate([s, [0.0]])
        s = s[0::2] + s[1::2]
    return float(s[0])


def mc_reduce(values, seed: int = 0) -> MCEstimate:
    """Mean and standard error by a fixed-order pairwise tree (blocks of 1024)."""
    x = np.ascontiguousarray(values, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValueError("cannot reduce an empty sample")
    mean = _tree_sum(x) / n
    if n == 1:
        return MCEstimate(mean, 0.0, 1, int(seed))
    dev = x - mean
    var = _tree_sum(dev * dev) / (n - 1)
    return MCEstimate(mean, math.sqrt(var / n), n, int(seed))
