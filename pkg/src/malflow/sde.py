"""Euler solution of dX = b(t, X) dt + dB forward and backward in time, and
Doleans-Dade (Girsanov) weights along Brownian paths."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mc
from .drift import DriftSpec
from .errors import InvalidArgument, NumericOverflow
from .paths import BrownianPath, TimeGrid, sample_increments


@dataclass(frozen=True)
class SolutionPath:
    grid: TimeGrid
    x0: np.ndarray
    states: np.ndarray  # (n_steps + 1, d)
    path: BrownianPath

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def euler_residual(self, spec: DriftSpec) -> np.ndarray:
        X, g = self.states, self.grid
        t = g.nodes[:-1, None]
        return X[1:] - X[:-1] - spec(t, X[:-1]) * g.dt - self.path.increments


@dataclass(frozen=True)
class GirsanovWeight:
    log_value: float
    eps: float = 0.0

    @property
    def value(self) -> float:
        return math.exp(self.log_value)


def _as_state(x0, d) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape[-1] != d:
        raise InvalidArgument(f"state has dimension {x0.shape[-1]}, drift expects {d}")
    return x0


def _check_finite(x, j):
    if not np.all(np.isfinite(x)):
        raise NumericOverflow(f"non-finite state at step {j}", step=j)


def euler(spec: DriftSpec, x0, dB: np.ndarray, grid: TimeGrid, keep_path: bool = True, start: int = 0):
    """Vectorised Euler scheme.

    ``dB`` has shape (..., n, d) holding increments for steps ``start ..
    start + n - 1``; ``x0`` broadcasts against (..., d). Returns all states
    (..., n + 1, d) or only the terminal state.
    """
    n = dB.shape[-2]
    x = np.broadcast_to(_as_state(x0, spec.d), dB.shape[:-2] + (spec.d,)).astype(float)
    dt = grid.dt
    nodes = grid.nodes
    if keep_path:
        out = np.empty(dB.shape[:-2] + (n + 1, spec.d))
        out[..., 0, :] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n):
            x = x + spec(nodes[start + j], x) * dt + dB[..., j, :]
            _check_finite(x, start + j)
            if keep_path:
                out[..., j + 1, :] = x
    return out if keep_path else x


def solve_forward(spec: DriftSpec, x0, path: BrownianPath) -> SolutionPath:
    x0 = _as_state(x0, spec.d)
    if path.d != spec.d:
        raise InvalidArgument(f"path dimension {path.d} != drift dimension {spec.d}")
    states = euler(spec, x0, path.increments, path.grid)
    return SolutionPath(path.grid, x0.copy(), states, path)


def backward_states(spec: DriftSpec, x_terminal, path: BrownianPath, t_index: int) -> np.ndarray:
    """Backward trajectory z(t_j), j = 0..t_index, with z(t_index) = x_terminal.

    Returns shape (t_index + 1, ..., d); row ``j`` is z(t_j).
    """
    g = path.grid
    if not 0 <= t_index <= g.n_steps:
        raise InvalidArgument(f"t_index {t_index} outside grid")
    z = np.asarray(x_terminal, dtype=float)
    z = _as_state(z, spec.d)
    nodes, dt, dB = g.nodes, g.dt, path.increments
    out = np.empty((t_index + 1,) + z.shape)
    out[t_index] = z
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(t_index - 1, -1, -1):
            z = z - spec(nodes[j + 1], z) * dt - dB[j]
            _check_finite(z, j)
            out[j] = z
    return out


def solve_backward(spec: DriftSpec, x_terminal, path: BrownianPath, t: float) -> np.ndarray:
    """Inverse flow: the initial point whose backward-Euler trajectory ends at ``x_terminal`` at ``t``."""
    return backward_states(spec, x_terminal, path, path.grid.index_of(t))[0]


def girsanov_log_weight(spec: DriftSpec, x0, dB: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Left-point Ito sum of ``b(t_j, x0 + B_j) . dB_j - |b|^2 dt / 2``, vectorised over leading axes."""
    n = dB.shape[-2]
    x = np.broadcast_to(_as_state(x0, spec.d), dB.shape[:-2] + (spec.d,)).astype(float)
    nodes, dt = grid.nodes, grid.dt
    acc = np.zeros(dB.shape[:-2])
    for j in range(n):
        bj = spec(nodes[j], x)
        acc += np.sum(bj * dB[..., j, :], axis=-1) - 0.5 * np.sum(bj * bj, axis=-1) * dt
        x = x + dB[..., j, :]
    return acc


def girsanov_weight(spec: DriftSpec, x0, path: BrownianPath) -> GirsanovWeight:
    return GirsanovWeight(float(girsanov_log_weight(spec, x0, path.increments, path.grid)))


@dataclass
class GirsanovComparison:
    direct: mc.Estimate
    reweighted: mc.Estimate
    weight_mean: mc.Estimate

    @property
    def z_score(self) -> float:
        se = math.hypot(self.direct.se, self.reweighted.se)
        return abs(self.direct.mean - self.reweighted.mean) / se if se > 0 else 0.0


def girsanov_comparison(spec: DriftSpec, x0, f, grid: TimeGrid, n_paths: int, seed: int,
                        workers: int | None = None) -> GirsanovComparison:
    """E f(X_T) by forward Euler against E[f(x0 + B_T) * weight], on independent path sets."""
    d = spec.d

    def direct(start, count):
        dB = sample_increments(seed, grid, d, start, count)
        return np.atleast_1d(f(euler(spec, x0, dB, grid, keep_path=False)))

    def weighted(start, count):
        dB = sample_increments(seed + 1, grid, d, start, count)
        w = np.exp(girsanov_log_weight(spec, x0, dB, grid))
        xT = _as_state(x0, d) + dB.sum(axis=1)
        return np.column_stack([f(xT) * w, w])

    a = mc.map_paths(direct, n_paths, workers=workers)
    b = mc.map_paths(weighted, n_paths, workers=workers)
    return GirsanovComparison(mc.mean_se(a), mc.mean_se(b[:, 0]), mc.mean_se(b[:, 1]))


@dataclass
class MomentDiagnostic:
    eps: float
    moment: mc.Estimate
    moment_half: mc.Estimate

    @property
    def stability_ratio(self) -> float:
        return self.moment_half.mean / self.moment.mean


def weight_moment_diagnostic(spec: DriftSpec, x0, eps: float, n_paths: int, grid: TimeGrid,
                             seed: int = 0, workers: int | None = None) -> MomentDiagnostic:
    """Empirical ``E[weight^(1+eps)]`` on N paths and on the first N/2 of them."""
    if not eps > 0:
        raise InvalidArgument("eps must be > 0")

    def chunk(start, count):
        dB = sample_increments(seed, grid, spec.d, start, count)
        return np.exp((1.0 + eps) * girsanov_log_weight(spec, x0, dB, grid))

    v = mc.map_paths(chunk, n_paths, workers=workers)
    return MomentDiagnostic(eps, mc.mean_se(v), mc.mean_se(v[: max(1, n_paths // 2)]))


def simulate(spec: DriftSpec, x0, grid: TimeGrid, n_paths: int, seed: int) -> np.ndarray:
    """Full Euler trajectories for paths ``0 .. n_paths-1``, shape (n_paths, n_steps + 1, d)."""
    dB = sample_increments(seed, grid, spec.d, 0, n_paths)
    return euler(spec, x0, dB, grid)
