"""Pathwise solution of the stochastic transport equation

    d_t u + b . grad u dt + sum_i e_i . grad u o dB^i = 0,   u(0) = u0,

by composing the initial datum with the inverse Euler flow,
``u(t, x) = u0(phi_t^{-1}(x))``, together with Ito-form and weak-form residuals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .drift import DriftSpec
from .errors import DomainError, InvalidArgument
from .paths import BrownianPath, SeedSpec, make_grid, refine_path, sample_path


@dataclass(frozen=True)
class InitialDatum:
    name: str
    d: int
    u: Callable
    grad: Callable
    hess: Callable
    sup: float
    grad_sup: float
    hess_sup: float
    bounded: bool = True


def initial_datum(name: str, d: int = 1, **params) -> InitialDatum:
    """``gauss-bump`` (center, width), ``cosine`` (omega), ``poly-probe`` (degree 1 or 2, unbounded)."""
    if name == "gauss-bump":
        c = np.broadcast_to(np.asarray(params.get("center", 0.0), dtype=float), (d,)).copy()
        w = float(params.get("width", 1.0))

        def u(x):
            r = np.asarray(x) - c
            return np.exp(-0.5 * np.sum(r * r, axis=-1) / w**2)

        def grad(x):
            r = np.asarray(x) - c
            return -r / w**2 * u(x)[..., None]

        def hess(x):
            r = np.asarray(x) - c
            return (r[..., :, None] * r[..., None, :] / w**4 - np.eye(d) / w**2) * u(x)[..., None, None]

        return InitialDatum(name, d, u, grad, hess, 1.0, math.exp(-0.5) / w, 1.0 / w**2)
    if name == "cosine":
        om = np.broadcast_to(np.asarray(params.get("omega", 1.0), dtype=float), (d,)).copy()
        nrm = float(np.linalg.norm(om))

        def u(x):
            return np.cos(np.asarray(x) @ om)

        def grad(x):
            return -np.sin(np.asarray(x) @ om)[..., None] * om

        def hess(x):
            return -np.cos(np.asarray(x) @ om)[..., None, None] * np.outer(om, om)

        return InitialDatum(name, d, u, grad, hess, 1.0, nrm, nrm**2)
    if name == "poly-probe":
        degree = int(params.get("degree", 1))
        e1 = np.zeros(d)
        e1[0] = 1.0
        if degree == 1:
            return InitialDatum(name, d, lambda x: np.asarray(x)[..., 0],
                                lambda x: np.broadcast_to(e1, np.shape(x)).copy(),
                                lambda x: np.zeros(np.shape(x) + (d,)), math.inf, 1.0, 0.0, bounded=False)
        if degree == 2:
            E = np.outer(e1, e1)
            return InitialDatum(name, d, lambda x: np.asarray(x)[..., 0] ** 2,
                                lambda x: 2.0 * np.asarray(x)[..., 0:1] * e1,
                                lambda x: np.broadcast_to(2.0 * E, np.shape(x) + (d,)).copy(),
                                math.inf, math.inf, 2.0, bounded=False)
        raise InvalidArgument("poly-probe degree must be 1 or 2")
    raise InvalidArgument(f"unknown initial datum '{name}'")


@dataclass(frozen=True)
class TransportSolution:
    path: BrownianPath
    u0: InitialDatum
    x: np.ndarray  # (n_x, d)
    t_index: np.ndarray  # (n_t,)
    values: np.ndarray  # (n_t, n_x)
    grad: np.ndarray  # (n_t, n_x, d)
    laplacian: np.ndarray | None  # (n_t, n_x)
    preimage: np.ndarray  # phi_t^{-1}(x), (n_t, n_x, d)

    @property
    def t(self) -> np.ndarray:
        return self.path.grid.nodes[self.t_index]


def _backward_batch(spec: DriftSpec, path: BrownianPath, x: np.ndarray, starts: np.ndarray, order: int):
    """Backward Euler from node ``starts[a]`` to 0 for every (a, x_k), with Jacobian (and Hessian)."""
    g = path.grid
    d = spec.d
    S, K = len(starts), len(x)
    z = np.broadcast_to(x, (S, K, d)).astype(float).copy()
    J = np.broadcast_to(np.eye(d), (S, K, d, d)).copy() if order >= 1 else None
    H = np.zeros((S, K, d, d, d)) if order >= 2 else None
    nodes, dt, dB = g.nodes, g.dt, path.increments
    top = int(starts.max()) if S else 0
    for i in range(top - 1, -1, -1):
        active = (starts > i)[:, None]
        t = nodes[i + 1]
        if order >= 1:
            A = spec.derivative(1, t, z)
        if order >= 2:
            B2 = spec.derivative(2, t, z)
            Hn = H - dt * (np.einsum("skim,skmac->skiac", A, H) + np.einsum("skimn,skma,sknc->skiac", B2, J, J))
            H = np.where(active[..., None, None, None], Hn, H)
        if order >= 1:
            Jn = J - dt * np.einsum("skim,skmc->skic", A, J)
            J = np.where(active[..., None, None], Jn, J)
        zn = z - spec(t, z) * dt - dB[i]
        z = np.where(active[..., None], zn, z)
    if not np.all(np.isfinite(z)):
        raise DomainError("backward characteristics became non-finite")
    return z, J, H


def solve_transport(spec: DriftSpec, u0: InitialDatum, path: BrownianPath, x_points, t_nodes=None,
                    laplacian: str | None = "fd", fd_h: float = 1e-3) -> TransportSolution:
    """``u(t, x) = u0(phi_t^{-1}(x))`` with gradient by the chain rule through the backward Jacobian.

    ``laplacian`` is ``"fd"`` (fourth-order differences of the chain-rule
    gradient), ``"chain"`` (second-order chain rule, needs k >= 2) or None.
    """
    if spec.d != u0.d or path.d != spec.d:
        raise InvalidArgument("dimension mismatch between drift, datum and path")
    x = np.asarray(x_points, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if spec.d == 1 else x[None, :]
    g = path.grid
    t_idx = np.arange(g.n_steps + 1) if t_nodes is None else np.asarray(t_nodes, dtype=int)
    if t_idx.min() < 0 or t_idx.max() > g.n_steps:
        raise InvalidArgument("t_nodes outside grid")
    order = 2 if laplacian == "chain" else 1
    if order == 2:
        spec.require(2, "the chain-rule Laplacian")
    z, J, H = _backward_batch(spec, path, x, t_idx, order)
    gu = u0.grad(z)
    vals = u0.u(z)
    grad = np.einsum("ski,skic->skc", gu, J)
    lap = None
    if laplacian == "chain":
        hu = u0.hess(z)
        lap = np.einsum("skij,skic,skjc->sk", hu, J, J) + np.einsum("ski,skicc->sk", gu, H)
    elif laplacian == "fd":
        lap = np.zeros(vals.shape)
        d = spec.d
        for c in range(d):
            e = np.zeros(d)
            e[c] = fd_h
            shifted = np.concatenate([x + 2 * e, x + e, x - e, x - 2 * e])
            zs, Js, _ = _backward_batch(spec, path, shifted, t_idx, 1)
            gs = np.einsum("ski,ski->sk", u0.grad(zs), Js[..., c]).reshape(len(t_idx), 4, len(x))
            lap += (-gs[:, 0] + 8 * gs[:, 1] - 8 * gs[:, 2] + gs[:, 3]) / (12 * fd_h)
    elif laplacian is not None:
        raise InvalidArgument("laplacian must be 'fd', 'chain' or None")
    return TransportSolution(path, u0, x, t_idx, vals, grad, lap, z)


def _require_full_series(sol: TransportSolution):
    n = sol.path.grid.n_steps
    if len(sol.t_index) != n + 1 or np.any(sol.t_index != np.arange(n + 1)):
        raise InvalidArgument("residuals need the solution at every grid node")


def ito_residual(sol: TransportSolution, spec: DriftSpec, x_index: int | None = None) -> np.ndarray:
    """Discrete Ito-form residual at every node, left-point sums, for one or all x points.

    ``R(t_n) = u(t_n) - u0 + sum_{j<n} [b . grad u dt + grad u . dB_j - lap u dt / 2]``.
    Returns shape (n + 1,) for one x, or (n + 1, n_x).
    """
    _require_full_series(sol)
    if sol.laplacian is None:
        raise InvalidArgument("Ito residual needs the Laplacian")
    g = sol.path.grid
    dt, dB = g.dt, sol.path.increments
    x = sol.x
    b = np.stack([spec(tj, x) for tj in g.nodes[:-1]])  # (n, n_x, d)
    gu = sol.grad[:-1]
    incr = np.sum(b * gu, axis=-1) * dt + np.einsum("skc,sc->sk", gu, dB) - 0.5 * sol.laplacian[:-1] * dt
    R = np.zeros_like(sol.values)
    np.cumsum(incr, axis=0, out=R[1:])
    R += sol.values - sol.values[0]
    return R[:, x_index] if x_index is not None else R


def stratonovich_residual(sol: TransportSolution, spec: DriftSpec, x_index: int | None = None) -> np.ndarray:
    """As :func:`ito_residual` but with midpoint stochastic sums and no Laplacian term."""
    _require_full_series(sol)
    g = sol.path.grid
    dt, dB = g.dt, sol.path.increments
    b = np.stack([spec(tj, sol.x) for tj in g.nodes[:-1]])
    mid = 0.5 * (sol.grad[:-1] + sol.grad[1:])
    incr = np.sum(b * sol.grad[:-1], axis=-1) * dt + np.einsum("skc,sc->sk", mid, dB)
    R = np.zeros_like(sol.values)
    np.cumsum(incr, axis=0, out=R[1:])
    R += sol.values - sol.values[0]
    return R[:, x_index] if x_index is not None else R


@dataclass(frozen=True)
class TestFunction:
    name: str
    theta: Callable
    dtheta: Callable
    support: tuple  # interval outside which theta is (numerically) zero


def test_function(name: str = "bump", center: float = 0.0, width: float = 1.0) -> TestFunction:
    """Compactly supported ``bump``, Gaussian ``gauss`` (support: 8 widths), or ``zero``."""
    if name == "bump":
        def th(x):
            y = (np.asarray(x) - center) / width
            inside = np.abs(y) < 1
            q = np.where(inside, 1 - y * y, 1.0)
            return np.where(inside, np.exp(-1.0 / q), 0.0)

        def dth(x):
            y = (np.asarray(x) - center) / width
            inside = np.abs(y) < 1
            q = np.where(inside, 1 - y * y, 1.0)
            return np.where(inside, np.exp(-1.0 / q) * (-2 * y / q**2) / width, 0.0)

        return TestFunction(name, th, dth, (center - width, center + width))
    if name == "gauss":
        def th(x):
            y = (np.asarray(x) - center) / width
            return np.exp(-0.5 * y * y)

        def dth(x):
            y = (np.asarray(x) - center) / width
            return -y / width * np.exp(-0.5 * y * y)

        return TestFunction(name, th, dth, (center - 8 * width, center + 8 * width))
    if name == "zero":
        return TestFunction(name, lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                            lambda x: np.zeros_like(np.asarray(x, dtype=float)), (center, center))
    raise InvalidArgument(f"unknown test function '{name}'")
test_function.__test__ = False  # keep pytest from collecting the factory
TestFunction.__test__ = False


def _trapezoid(values, x):
    return np.trapezoid(values, x, axis=-1) if hasattr(np, "trapezoid") else np.trapz(values, x, axis=-1)


def weak_residual(sol: TransportSolution, spec: DriftSpec, theta: TestFunction) -> np.ndarray:
    """Discrete weak-form residual at every node (d = 1, uniform x grid covering supp theta).

    ``W(t_n) = <u(t_n), theta> - <u0, theta> - sum_j dt <u(t_j), b theta' + b' theta>
    - sum_j (A_j + A_{j+1})/2 dB_j`` with ``A_j = <u(t_j), theta'>``.
    """
    _require_full_series(sol)
    if spec.d != 1:
        raise InvalidArgument("weak residual is implemented for d = 1")
    x = sol.x[:, 0]
    if x.size < 3 or np.any(np.diff(x) <= 0):
        raise InvalidArgument("weak residual needs an increasing x grid")
    lo, hi = theta.support
    if lo < x[0] or hi > x[-1]:
        raise DomainError(f"quadrature box [{x[0]}, {x[-1]}] does not cover the test-function support [{lo}, {hi}]")
    g = sol.path.grid
    dt, dB = g.dt, sol.path.increments[:, 0]
    th, dth = theta.theta(x), theta.dtheta(x)
    u = sol.values
    pair = _trapezoid(u * th, x)
    A = _trapezoid(u * dth, x)
    drift_terms = np.array([_trapezoid(u[j] * (spec(tj, x[:, None])[:, 0] * dth
                                               + spec.derivative(1, tj, x[:, None])[:, 0, 0] * th), x)
                            for j, tj in enumerate(g.nodes[:-1])])
    incr = drift_terms * dt + 0.5 * (A[:-1] + A[1:]) * dB
    W = np.zeros(g.n_steps + 1)
    np.cumsum(incr, axis=0, out=W[1:])
    return pair - pair[0] - W


@dataclass
class RefinementStudy:
    steps: list
    sup_residuals: np.ndarray  # (levels,) averaged over paths
    per_path: np.ndarray  # (paths, levels)

    @property
    def rates(self) -> np.ndarray:
        return -np.diff(np.log2(self.sup_residuals))

    @property
    def fitted_rate(self) -> float:
        lv = np.arange(len(self.steps))
        return float(-np.polyfit(lv, np.log2(self.sup_residuals), 1)[0])


def ito_refinement_study(spec: DriftSpec, u0: InitialDatum, x_points, master_seed: int, n_paths: int = 8,
                         base_steps: int = 64, levels: int = 4, T: float = 1.0) -> RefinementStudy:
    """Sup over nodes and x of the Ito residual for dt, dt/2, ... on bridge-refined copies of each path."""
    grid = make_grid(0.0, T, base_steps)
    per_path = np.zeros((n_paths, levels))
    for p in range(n_paths):
        base = sample_path(SeedSpec(master_seed, p), grid, spec.d)
        for lev in range(levels):
            path = refine_path(base, lev) if lev else base
            sol = solve_transport(spec, u0, path, x_points)
            per_path[p, lev] = float(np.max(np.abs(ito_residual(sol, spec))))
    return RefinementStudy([base_steps * 2**l for l in range(levels)], per_path.mean(axis=0), per_path)


def weak_refinement_study(spec: DriftSpec, u0: InitialDatum, theta: TestFunction, box, master_seed: int,
                          base_steps: int = 32, base_nx: int = 101, levels: int = 4, T: float = 1.0,
                          path_index: int = 0) -> RefinementStudy:
    """Sup of the weak residual under simultaneous halving of dt and dx on one bridge-refined path."""
    grid = make_grid(0.0, T, base_steps)
    base = sample_path(SeedSpec(master_seed, path_index), grid, spec.d)
    sups = []
    for lev in range(levels):
        path = refine_path(base, lev) if lev else base
        x = np.linspace(box[0], box[1], (base_nx - 1) * 2**lev + 1)
        sol = solve_transport(spec, u0, path, x, laplacian=None)
        sups.append(float(np.max(np.abs(weak_residual(sol, spec, theta)))))
    sups = np.array(sups)
    return RefinementStudy([base_steps * 2**l for l in range(levels)], sups, sups[None, :])
