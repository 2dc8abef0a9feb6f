"""One-dimensional density estimation by Malliavin integration by parts.

With ``F = (int_0^T D_s X_t ds)^{-1}`` and ``G_0 = 1``, the weights
``G_{i+1} = delta(G_i F) = G_i F B_T - int_0^T D_s(G_i F) ds`` give

    d^i/dy^i p(y) = (-1)^i E[1{X_t > y} G_{i+1}].

Every ``int_0^T D_s(.) ds`` is a directional derivative of the Euler functional
along the Cameron-Martin direction ``h(r) = r - t0``, i.e. the derivative in
``eps`` of the scheme with drift ``b + eps``. Those derivatives obey the
tangent recursions implemented in :func:`tangents`, so the weights cost O(n)
per path and are exact for the discretised law (the estimator is unbiased for
the Euler density).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import mc
from .drift import DriftSpec
from .errors import CapabilityError, InvalidArgument
from .malliavin import malliavin_first, malliavin_second
from .paths import BrownianPath, TimeGrid, sample_increments
from .sde import SolutionPath

MAX_ORDER = 1


@dataclass
class WeightChain:
    """Weights of one path: ``F``, ``G[0..i_max]`` and optionally ``D_s F`` on the grid."""
    F: float
    G: list
    tangents: tuple  # int D_s X ds, and its second/third directional derivatives
    DsF: np.ndarray | None = None


@dataclass
class DensityEstimate:
    y: np.ndarray
    order: int
    values: np.ndarray
    std_errors: np.ndarray
    n_paths: int
    method: str
    extra: dict = field(default_factory=dict)


def require_density_order(spec: DriftSpec, order: int) -> None:
    if order < 0:
        raise InvalidArgument("density order must be >= 0")
    if order > MAX_ORDER:
        raise CapabilityError(f"density derivatives of order {order} are not implemented (max {MAX_ORDER})")
    need = order + 2
    if spec.d != 1:
        raise CapabilityError("Malliavin density estimation is one-dimensional")
    if spec.k < need:
        raise CapabilityError(
            f"density order {order} needs drift smoothness k >= {need} "
            f"(Malliavin weights need k >= 2 even for the density itself); drift '{spec.name}' has k={spec.k}")


def skorokhod_of_scaled(F_like: float, DsF_like: np.ndarray, path: BrownianPath) -> float:
    """``delta(F 1_[0,T]) = F B_T - int_0^T D_s F ds`` with left-point quadrature."""
    if path.d != 1:
        raise CapabilityError("skorokhod_of_scaled is one-dimensional")
    DsF_like = np.asarray(DsF_like, dtype=float).ravel()
    return float(F_like * path.terminal[0] - math.fsum(DsF_like * path.grid.dt))


def tangents(spec: DriftSpec, x0, dB: np.ndarray, grid: TimeGrid, depth: int, start_node: int = 0):
    """Terminal state and directional derivatives ``(X, Y1, ..., Y_depth)``.

    ``Y_m`` is the m-th derivative in ``eps`` of the Euler terminal state for
    drift ``b + eps``; ``Y1 = int D_s X ds`` with the exact discrete Malliavin
    derivative. Vectorised over leading axes of ``dB`` (shape (..., n, 1)).
    """
    if depth > 3:
        raise CapabilityError("tangent recursions are implemented up to depth 3")
    spec.require(depth, f"{depth} directional derivatives")
    n = dB.shape[-2]
    shape = dB.shape[:-2] + (1,)
    x = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1)[:1], shape).astype(float)
    y1 = np.zeros(shape)
    y2 = np.zeros(shape)
    y3 = np.zeros(shape)
    nodes, dt = grid.nodes, grid.dt
    for j in range(n):
        t = nodes[start_node + j]
        b0 = spec(t, x)
        if depth >= 1:
            b1 = spec.derivative(1, t, x)[..., 0]
        if depth >= 2:
            b2 = spec.derivative(2, t, x)[..., 0, 0]
        if depth >= 3:
            b3 = spec.derivative(3, t, x)[..., 0, 0, 0]
            y3 = y3 + (b3 * y1**3 + 3.0 * b2 * y1 * y2 + b1 * y3) * dt
        if depth >= 2:
            y2 = y2 + (b2 * y1 * y1 + b1 * y2) * dt
        if depth >= 1:
            y1 = y1 + (b1 * y1 + 1.0) * dt
        x = x + b0 * dt + dB[..., j, :]
    return x[..., 0], y1[..., 0], y2[..., 0], y3[..., 0]


def weights_from_tangents(BT, A1, A2, A3, span: float, i_max: int):
    """``F`` and ``G_0..G_{i_max}`` from terminal noise and tangents (vectorised)."""
    F = 1.0 / A1
    G = [np.ones_like(F)]
    if i_max >= 1:
        dF = -A2 * F * F
        G1 = F * BT - dF
        G.append(G1)
    if i_max >= 2:
        d2F = -A3 * F * F + 2.0 * A2 * A2 * F**3
        dG1 = dF * BT + F * span - d2F
        G.append(G1 * F * BT - (dG1 * F + G1 * dF))
    return F, G


def weight_chain(spec: DriftSpec, sol: SolutionPath, t_index: int | None = None, i_max: int = 1,
                 grid_derivative: bool = False) -> WeightChain:
    """Weights along one solved path.

    With ``grid_derivative=True`` the grid function ``D_s F`` is also built from
    second Malliavin derivatives, ``D_s F = -F^2 int_0^T D_s D_u X_t du``; it is
    an independent route to ``int D_s F ds`` and costs O(n^2).
    """
    if spec.d != 1:
        raise CapabilityError("weight chains are one-dimensional")
    if i_max < 0 or i_max > MAX_ORDER + 1:
        raise CapabilityError(f"i_max must be in 0..{MAX_ORDER + 1}")
    if i_max >= 1:
        spec.require(i_max + 1, f"weight G_{i_max}")
    g = sol.grid
    t_index = g.n_steps if t_index is None else t_index
    depth = max(1, i_max + 1)
    dB = sol.path.increments[:t_index]
    _, A1, A2, A3 = tangents(spec, sol.x0, dB, g, min(depth, 3))
    BT = sol.path.values[t_index][0]
    span = g.nodes[t_index] - g.t0
    F, G = weights_from_tangents(BT, A1, A2, A3, span, i_max)
    DsF = None
    if grid_derivative:
        spec.require(2, "the grid derivative of F")
        jet = malliavin_first(spec, sol, t_index)
        DsF = np.zeros(g.n_steps)
        for s in range(t_index):
            inner = [malliavin_second(spec, sol, t_index, u, s, jet=jet)[0, 0, 0] for u in range(t_index)]
            DsF[s] = -F * F * math.fsum(np.array(inner) * g.dt)
    return WeightChain(float(F), [float(v) for v in G], (float(A1), float(A2), float(A3)), DsF)


def default_y_grid(mean: float, sd: float, n: int = 41) -> np.ndarray:
    return np.linspace(mean - 4 * sd, mean + 4 * sd, n)


def _per_path_density_terms(spec, x0, grid, seed, order, y, start, count):
    dB = sample_increments(seed, grid, 1, start, count)
    X, A1, A2, A3 = tangents(spec, x0, dB, grid, order + 2 if order + 2 <= 3 else 3)
    BT = dB[:, :, 0].sum(axis=1)
    _, G = weights_from_tangents(BT, A1, A2, A3, grid.T - grid.t0, order + 1)
    w = G[order + 1]
    return (X[:, None] > y[None, :]) * w[:, None]


def estimate_density(spec: DriftSpec, x0: float, t: float, y_points, order: int = 0, n_paths: int = 100_000,
                     seed: int = 0, n_steps: int = 512, workers: int | None = None) -> DensityEstimate:
    """Malliavin-weight estimate of ``p^{(order)}(y)`` for the Euler solution at time ``t``."""
    require_density_order(spec, order)
    grid = TimeGrid(0.0, float(t), int(n_steps))
    y = np.atleast_1d(np.asarray(y_points, dtype=float))
    terms = mc.map_paths(lambda s, c: _per_path_density_terms(spec, x0, grid, seed, order, y, s, c),
                         n_paths, workers=workers)
    mean, se = mc.column_mean_se(terms)
    sign = -1.0 if order % 2 else 1.0
    return DensityEstimate(y, order, sign * mean, se, n_paths, "malliavin", {"dt": grid.dt})


def terminal_samples(spec: DriftSpec, x0: float, t: float, n_paths: int, seed: int = 0, n_steps: int = 512,
                     workers: int | None = None) -> np.ndarray:
    grid = TimeGrid(0.0, float(t), int(n_steps))
    from .sde import euler

    def chunk(start, count):
        dB = sample_increments(seed, grid, spec.d, start, count)
        return euler(spec, x0, dB, grid, keep_path=False)[:, 0]

    return mc.map_paths(chunk, n_paths, workers=workers)


def silverman_bandwidth(samples: np.ndarray) -> float:
    x = np.asarray(samples, dtype=float)
    n = x.size
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    if spread <= 0:
        spread = 1.0
    return 0.9 * spread * n ** (-0.2)


def kde_baseline(samples, y_points, bandwidth="auto", chunk: int = 20000) -> DensityEstimate:
    """Gaussian-kernel density estimate; ``bandwidth="auto"`` uses Silverman's rule."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise InvalidArgument("kde needs at least one sample")
    h = silverman_bandwidth(x) if bandwidth == "auto" else float(bandwidth)
    if not h > 0:
        raise InvalidArgument("bandwidth must be > 0")
    y = np.atleast_1d(np.asarray(y_points, dtype=float))
    parts = []
    for s in range(0, x.size, chunk):
        z = (y[None, :] - x[s:s + chunk, None]) / h
        parts.append(np.exp(-0.5 * z * z) / (h * math.sqrt(2 * math.pi)))
    mean, se = mc.column_mean_se(np.vstack(parts))
    return DensityEstimate(y, 0, mean, se, x.size, "kde", {"bandwidth": h})


def gaussian_density_derivative(y, mean, var, order):
    z = (np.asarray(y, dtype=float) - mean)
    p = np.exp(-0.5 * z * z / var) / math.sqrt(2 * math.pi * var)
    if order == 0:
        return p
    if order == 1:
        return -z / var * p
    if order == 2:
        return (z * z / var**2 - 1.0 / var) * p
    raise InvalidArgument("oracle derivatives implemented up to order 2")


def oracle_moments(family: str, params: dict | None, x0: float, t: float):
    p = dict(params or {})
    if family == "zero":
        return x0, t
    if family == "const":
        c = float(np.atleast_1d(p.get("c", 1.0))[0])
        return x0 + c * t, t
    if family == "ou":
        th = float(p.get("theta", 1.0))
        return x0 * math.exp(-th * t), -math.expm1(-2 * th * t) / (2 * th)
    raise InvalidArgument(f"no closed-form density for drift family '{family}'")


def oracle_density(family: str, params: dict | None, x0: float, t: float, y_points, order: int = 0) -> DensityEstimate:
    """Exact Gaussian density (or derivative) of the continuous-time solution."""
    mean, var = oracle_moments(family, params, x0, t)
    y = np.atleast_1d(np.asarray(y_points, dtype=float))
    vals = gaussian_density_derivative(y, mean, var, order)
    return DensityEstimate(y, order, vals, np.zeros_like(vals), 0, "oracle", {"mean": mean, "var": var})


@dataclass
class DualityCheck:
    lhs: mc.Estimate  # E[X_t delta(1)] = E[X_t B_T]
    rhs: mc.Estimate  # E[int D_s X_t ds]

    @property
    def z_score(self) -> float:
        se = math.hypot(self.lhs.se, self.rhs.se)
        return abs(self.lhs.mean - self.rhs.mean) / se if se > 0 else 0.0


def duality_check(spec: DriftSpec, x0: float, t: float, n_paths: int, seed: int = 0, n_steps: int = 256) -> DualityCheck:
    """Both sides of ``E[X_t delta(1)] = E[<D X_t, 1>]``."""
    spec.require(1, "the duality check")
    grid = TimeGrid(0.0, float(t), int(n_steps))

    def chunk(start, count):
        dB = sample_increments(seed, grid, 1, start, count)
        X, A1, _, _ = tangents(spec, x0, dB, grid, 1)
        return np.column_stack([X * dB[:, :, 0].sum(axis=1), A1])

    v = mc.map_paths(chunk, n_paths)
    return DualityCheck(mc.mean_se(v[:, 0]), mc.mean_se(v[:, 1]))
