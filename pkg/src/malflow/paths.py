"""Time grids and reproducibly seeded Brownian paths.

Every path is a pure function of ``(master_seed, path_index)``: the pair is used
directly as the 128-bit key of a counter-based Philox generator, so paths can be
produced in any order, by any number of workers, with bit-identical results.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, OutOfRange

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.T)):
            raise InvalidArgument("grid bounds must be finite")
        if self.t0 < 0:
            raise InvalidArgument(f"t0 must be >= 0, got {self.t0}")
        if not self.T > self.t0:
            raise InvalidArgument(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidArgument(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        """Index of the grid node equal to ``t`` (within ``tol * dt``)."""
        j = int(round((t - self.t0) / self.dt))
        if j < 0 or j > self.n_steps or abs(self.t0 + j * self.dt - t) > tol * self.dt:
            raise OutOfRange(f"t={t} is not a node of the grid")
        return j

    def refined(self) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, 2 * self.n_steps)


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    path_index: int = 0

    def __post_init__(self):
        if self.path_index < 0:
            raise InvalidArgument("path_index must be >= 0")


@dataclass(frozen=True)
class BrownianPath:
    grid: TimeGrid
    increments: np.ndarray  # shape (n_steps, d)
    seed: SeedSpec | None = None

    @property
    def d(self) -> int:
        return self.increments.shape[1]

    @property
    def values(self) -> np.ndarray:
        """Cumulative path B(t_j), shape (n_steps + 1, d), with B(t_0) = 0."""
        out = np.zeros((self.grid.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


def make_grid(t0: float, T: float, n_steps: int) -> TimeGrid:
    return TimeGrid(float(t0), float(T), int(n_steps))


def _generator(master_seed: int, path_index: int, stream: int = 0) -> np.random.Generator:
    # stream selects a disjoint region of the 256-bit counter space
    bitgen = np.random.Philox(key=[master_seed & _MASK64, path_index & _MASK64],
                              counter=[0, 0, 0, stream])
    return np.random.Generator(bitgen)


def _increments(master_seed, path_index, grid, d):
    z = _generator(master_seed, path_index).standard_normal((grid.n_steps, d))
    return z * np.sqrt(grid.dt)


def sample_path(seed: SeedSpec, grid: TimeGrid, d: int = 1) -> BrownianPath:
    if d < 1:
        raise InvalidArgument(f"dimension must be >= 1, got {d}")
    return BrownianPath(grid, _increments(seed.master_seed, seed.path_index, grid, d), seed)


def sample_increments(master_seed: int, grid: TimeGrid, d: int, start: int, count: int) -> np.ndarray:
    """Increments for paths ``start .. start+count-1``, shape (count, n_steps, d)."""
    if d < 1:
        raise InvalidArgument(f"dimension must be >= 1, got {d}")
    out = np.empty((count, grid.n_steps, d))
    for i in range(count):
        out[i] = _increments(master_seed, start + i, grid, d)
    return out


def bridge_value(path: BrownianPath, s: float) -> np.ndarray:
    """Piecewise-linear interpolant of the cumulative path at time ``s``."""
    g = path.grid
    if s < g.t0 or s > g.T:
        raise OutOfRange(f"s={s} outside [{g.t0}, {g.T}]")
    B = path.values
    x = (s - g.t0) / g.dt
    j = min(int(np.floor(x)), g.n_steps - 1)
    w = x - j
    if w == 0.0:
        return B[j].copy()
    return (1.0 - w) * B[j] + w * B[j + 1]


def refine_path(path: BrownianPath, level: int = 1) -> BrownianPath:
    """Halve the step ``level`` times by Brownian-bridge midpoint insertion.

    The coarse nodes are kept exactly, so refined paths share the same
    underlying realisation. Midpoint noise for refinement level ``l`` is drawn
    from stream ``l`` of the path's own key, hence reproducible.
    """
    if path.seed is None:
        raise InvalidArgument("refinement needs a seeded path")
    out = path
    for lev in range(1, level + 1):
        g = out.grid
        n, d = g.n_steps, out.d
        z = _generator(path.seed.master_seed, path.seed.path_index, stream=lev).standard_normal((n, d))
        # B(mid) - B(left) = dB/2 + sqrt(dt/4) Z
        first = 0.5 * out.increments + 0.5 * np.sqrt(g.dt) * z
        inc = np.empty((2 * n, d))
        inc[0::2] = first
        inc[1::2] = out.increments - first
        out = BrownianPath(g.refined(), inc, path.seed)
    return out


def write_path_csv(path: BrownianPath, filename) -> None:
    filename = Path(filename)
    with filename.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"b{i + 1}" for i in range(path.d)])
        for t, row in zip(path.grid.nodes, path.values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
