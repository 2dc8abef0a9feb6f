"""Malliavin derivatives of the Euler solution.

With additive noise, ``D_s X_t`` solves the same linear equation as the flow
Jacobian started at ``s``; the first derivative is therefore produced by the
same recursion as :func:`malflow.flow.variational_flow`. Second derivatives
are available through a quadrature formula (d = 1) and through the linear
second-variation equation (any d).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mc
from .drift import DriftSpec
from .errors import CapabilityError, InvalidArgument
from .flow import check_step_size, matmul
from .paths import TimeGrid, sample_increments
from .sde import SolutionPath, euler


@dataclass(frozen=True)
class MalliavinJet:
    """``D1[s, t]`` for grid indices s, t <= target; zero when s > t."""
    base: SolutionPath
    target: int
    D1: np.ndarray  # (target + 1, target + 1, d, d)
    D1_exp: np.ndarray | None = None  # exponential representation, d = 1 only

    def at(self, s_index: int, t_index: int) -> np.ndarray:
        return self.D1[s_index, t_index]


def _drift_jacobians(spec, sol, upto):
    nodes, X = sol.grid.nodes, sol.states
    return np.array([spec.derivative(1, nodes[j], X[j]) for j in range(upto)]).reshape(upto, spec.d, spec.d)


def malliavin_first(spec: DriftSpec, sol: SolutionPath, t_index: int | None = None) -> MalliavinJet:
    spec.require(1, "the Malliavin derivative")
    g = sol.grid
    t_index = g.n_steps if t_index is None else t_index
    if not 0 <= t_index <= g.n_steps:
        raise InvalidArgument("t_index outside grid")
    check_step_size(spec, g.dt)
    d, dt, n = spec.d, g.dt, t_index
    A = _drift_jacobians(spec, sol, n)
    D1 = np.zeros((n + 1, n + 1, d, d))
    eye = np.eye(d)
    for s in range(n + 1):
        D1[s, s] = eye
    for t in range(n):
        # all starts s <= t advance together
        cur = D1[: t + 1, t]
        D1[: t + 1, t + 1] = cur + dt * matmul(A[t], cur)
    D1_exp = None
    if d == 1:
        a = A[:, 0, 0] * dt
        cum = np.concatenate([[0.0], np.cumsum(a)])
        diff = cum[None, :] - cum[:, None]
        D1_exp = np.where(np.arange(n + 1)[:, None] <= np.arange(n + 1)[None, :], np.exp(diff), 0.0)
    return MalliavinJet(sol, t_index, D1, D1_exp)


def _check_second_capability(spec):
    if spec.k < 2:
        raise CapabilityError(
            f"second Malliavin derivative requires drift smoothness k >= 2; drift '{spec.name}' has k={spec.k}")


def malliavin_second(spec: DriftSpec, sol: SolutionPath, t_index: int, s1_index: int, s2_index: int,
                     method: str | None = None, jet: MalliavinJet | None = None) -> np.ndarray:
    """``D_{s2} D_{s1} X_t`` as a (d, d, d) tensor ``[i, a, c]`` (a: s1 noise, c: s2 noise).

    ``method="quadrature"`` (d = 1 default) uses
    ``D_{s1}X_t * int_{s1 v s2}^t b''(X_u) D_{s2}X_u du``; ``method="ode"``
    (any d) solves the Euler-discretised second-variation equation.
    """
    _check_second_capability(spec)
    method = method or ("quadrature" if spec.d == 1 else "ode")
    if jet is None or jet.target < t_index:
        jet = malliavin_first(spec, sol, t_index)
    d, dt, nodes, X = spec.d, sol.grid.dt, sol.grid.nodes, sol.states
    r = max(s1_index, s2_index)
    if r >= t_index:
        return np.zeros((d, d, d))
    D1 = jet.D1
    if method == "quadrature":
        if d != 1:
            raise CapabilityError("the quadrature form of the second derivative is one-dimensional")
        u = np.arange(r, t_index)
        b2 = np.array([spec.derivative(2, nodes[j], X[j])[0, 0, 0] for j in u])
        integral = math.fsum(b2 * D1[s2_index, u, 0, 0] * dt)
        return np.full((1, 1, 1), D1[s1_index, t_index, 0, 0] * integral)
    if method != "ode":
        raise InvalidArgument("method must be 'quadrature' or 'ode'")
    K = np.zeros((d, d, d))
    for j in range(r, t_index):
        A = spec.derivative(1, nodes[j], X[j])
        B2 = spec.derivative(2, nodes[j], X[j])
        K = K + dt * (np.einsum("im,mac->iac", A, K)
                      + np.einsum("imn,ma,nc->iac", B2, D1[s1_index, j], D1[s2_index, j]))
    return K


@dataclass(frozen=True)
class CovarianceMatrix:
    gamma: np.ndarray
    t: float

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.gamma))


def covariance(spec: DriftSpec, sol: SolutionPath, t_index: int | None = None,
               jet: MalliavinJet | None = None) -> CovarianceMatrix:
    g = sol.grid
    t_index = g.n_steps if t_index is None else t_index
    if jet is None or jet.target < t_index:
        jet = malliavin_first(spec, sol, t_index)
    D = jet.D1[:t_index, t_index]
    gamma = np.einsum("sia,sja->ij", D, D) * g.dt
    return CovarianceMatrix(0.5 * (gamma + gamma.T), float(g.nodes[t_index]))


def covariance_batch(spec: DriftSpec, X: np.ndarray, grid: TimeGrid, t_index: int) -> np.ndarray:
    """Malliavin covariance at node ``t_index`` for a batch of trajectories X (N, n+1, d)."""
    d, dt, nodes = spec.d, grid.dt, grid.nodes
    N = X.shape[0]
    J = np.broadcast_to(np.eye(d), (N, d, d)).copy()
    gamma = np.zeros((N, d, d))
    for s in range(t_index - 1, -1, -1):
        # J(s, t) = J(s+1, t) (I + Db(X_s) dt)
        A = spec.derivative(1, nodes[s], X[:, s])
        J = J + dt * matmul(J, A)
        gamma += matmul(J, np.swapaxes(J, -1, -2)) * dt
    return gamma


@dataclass
class NondegeneracyReport:
    p_list: list
    estimates: list  # mc.Estimate per p, over all N paths
    half_estimates: list  # over the first N/2 paths
    det_min: float
    det_max: float

    @property
    def ratios(self) -> list:
        return [h.mean / e.mean for e, h in zip(self.estimates, self.half_estimates)]

    @property
    def stable(self) -> bool:
        return all(abs(e.mean - h.mean) / e.mean <= 0.1 for e, h in zip(self.estimates, self.half_estimates))


def nondegeneracy_diagnostic(spec: DriftSpec, x0, t: float, p_list, n_paths: int, n_steps: int = 256,
                             seed: int = 0, workers: int | None = None) -> NondegeneracyReport:
    """Empirical ``E[(det gamma_t)^(-p)]`` for each p on a grid [0, t]."""
    p_list = [float(p) for p in p_list]
    if any(p <= 0 for p in p_list):
        raise InvalidArgument("p values must be positive")
    spec.require(1, "the Malliavin covariance")
    grid = TimeGrid(0.0, float(t), int(n_steps))
    check_step_size(spec, grid.dt)

    def chunk(start, count):
        dB = sample_increments(seed, grid, spec.d, start, count)
        X = euler(spec, x0, dB, grid)
        return np.linalg.det(covariance_batch(spec, X, grid, grid.n_steps))

    dets = mc.map_paths(chunk, n_paths, workers=workers)
    half = dets[: max(1, n_paths // 2)]
    ests = [mc.mean_se(dets ** (-p)) for p in p_list]
    halves = [mc.mean_se(half ** (-p)) for p in p_list]
    return NondegeneracyReport(p_list, ests, halves, float(dets.min()), float(dets.max()))
