"""First and second variations of the Euler flow, Picard partial sums, and
checks of the discrete flow (semigroup) property."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .drift import DriftSpec
from .errors import InvalidArgument
from .paths import BrownianPath
from .sde import SolutionPath, euler, solve_forward

MAX_PICARD_ORDER = 30


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Batched ``A @ B`` with a fixed summation order (bitwise reproducible across batch shapes)."""
    acc = A[..., :, 0, None] * B[..., 0, None, :]
    for m in range(1, A.shape[-1]):
        acc = acc + A[..., :, m, None] * B[..., m, None, :]
    return acc


@dataclass(frozen=True)
class FlowJet:
    """Jacobian ``J(s, t_j)`` and Hessian ``H(s, t_j)`` for nodes ``t_j >= s``.

    ``jacobian[j - s_index]`` is J(s, t_j); ``hessian[.., i, a, c]`` is
    the second derivative of component i with respect to x_a and x_c.
    """
    base: SolutionPath
    s_index: int
    jacobian: np.ndarray
    hessian: np.ndarray | None = None

    def J(self, t_index: int) -> np.ndarray:
        return self.jacobian[t_index - self.s_index]

    def H(self, t_index: int) -> np.ndarray:
        if self.hessian is None:
            raise InvalidArgument("hessian was not computed")
        return self.hessian[t_index - self.s_index]


def check_step_size(spec: DriftSpec, dt: float) -> None:
    if dt * spec.deriv_bounds[1] >= 0.5:
        raise InvalidArgument(
            f"step dt={dt:g} too coarse: need dt*|Db|_inf < 1/2 (|Db|_inf={spec.deriv_bounds[1]:g})")


def variational_flow(spec: DriftSpec, sol: SolutionPath, s_index: int = 0, hessian: bool | None = None) -> FlowJet:
    """Solve the Euler-discretised first (and second) variation equations from node ``s_index``."""
    g = sol.grid
    if not 0 <= s_index <= g.n_steps:
        raise InvalidArgument(f"s_index {s_index} outside grid")
    check_step_size(spec, g.dt)
    if hessian is None:
        hessian = spec.k >= 2
    if hessian:
        spec.require(2, "the flow Hessian")
    d, dt, nodes, X = spec.d, g.dt, g.nodes, sol.states
    n = g.n_steps - s_index
    I = np.eye(d)
    J = np.empty((n + 1, d, d))
    J[0] = I
    H = np.zeros((n + 1, d, d, d)) if hessian else None
    for r in range(n):
        j = s_index + r
        A = spec.derivative(1, nodes[j], X[j])
        J[r + 1] = J[r] + dt * matmul(A, J[r])
        if hessian:
            B2 = spec.derivative(2, nodes[j], X[j])
            H[r + 1] = H[r] + dt * (np.einsum("im,mac->iac", A, H[r])
                                    + np.einsum("imn,ma,nc->iac", B2, J[r], J[r]))
    return FlowJet(sol, s_index, J, H)


@dataclass(frozen=True)
class PicardTruncation:
    order: int
    partial_sums: np.ndarray  # (M + 1, d, d) at the target node
    terms: np.ndarray  # (M + 1, d, d)

    @property
    def term_norms(self) -> np.ndarray:
        return np.linalg.norm(self.terms, axis=(1, 2))

    def ratios(self) -> np.ndarray:
        nrm = self.term_norms
        with np.errstate(divide="ignore", invalid="ignore"):
            return nrm[1:] / nrm[:-1]


def picard_series(spec: DriftSpec, sol: SolutionPath, s_index: int, M: int, t_index: int | None = None,
                  order: str = "ode") -> PicardTruncation:
    """Partial sums of the iterated-integral series for J(s, t).

    Each term is an integral of products of ``Db(u_i, X_{u_i})`` over the
    ordered simplex ``s < u_1 < ... < u_m < t``, computed by left-point
    cumulative quadrature on the solver grid (cost O(n M)). ``order="ode"``
    multiplies later times on the left, which is the ordering that converges
    to the variational ODE for d > 1; ``order="literal"`` keeps
    ``Db(u_1) ... Db(u_m)`` left to right. The two coincide for d = 1.
    """
    if M < 0:
        raise InvalidArgument("Picard order must be >= 0")
    if M > MAX_PICARD_ORDER:
        raise InvalidArgument(f"Picard order {M} > {MAX_PICARD_ORDER} refused: terms decay factorially")
    if order not in ("ode", "literal"):
        raise InvalidArgument("order must be 'ode' or 'literal'")
    spec.require(1, "the Picard series")
    g = sol.grid
    t_index = g.n_steps if t_index is None else t_index
    if not 0 <= s_index <= t_index <= g.n_steps:
        raise InvalidArgument("need 0 <= s_index <= t_index <= n_steps")
    d, dt, nodes, X = spec.d, g.dt, g.nodes, sol.states
    A = np.array([spec.derivative(1, nodes[j], X[j]) for j in range(s_index, t_index)]).reshape(-1, d, d)
    n = t_index - s_index
    # prev[r] = term_{m-1}(t_{s+r}); cur is its cumulative integral against A
    prev = np.broadcast_to(np.eye(d), (n + 1, d, d)).copy()
    terms = [np.eye(d)]
    for _ in range(M):
        if order == "ode":
            incr = np.einsum("rij,rjk->rik", A, prev[:-1]) * dt
        else:
            incr = np.einsum("rij,rjk->rik", prev[:-1], A) * dt
        cur = np.zeros_like(prev)
        np.cumsum(incr, axis=0, out=cur[1:])
        terms.append(cur[-1].copy())
        prev = cur
    terms = np.array(terms)
    return PicardTruncation(M, np.cumsum(terms, axis=0), terms)


@dataclass
class FlowPropertyReport:
    composition_defect: float
    identity_defect: float

    @property
    def passed(self) -> bool:
        return self.composition_defect == 0.0 and self.identity_defect == 0.0


def flow_map(spec: DriftSpec, x, path: BrownianPath, s_index: int, t_index: int) -> np.ndarray:
    """phi_{s,t}(x): Euler restarted at node s, run to node t on the shared grid."""
    if not 0 <= s_index <= t_index <= path.grid.n_steps:
        raise InvalidArgument("need s <= t on the grid")
    dB = path.increments[s_index:t_index]
    return euler(spec, x, dB, path.grid, keep_path=False, start=s_index)


def check_flow_properties(spec: DriftSpec, x0, path: BrownianPath, s: int, u: int, t: int) -> FlowPropertyReport:
    """Composition and identity defects of the discrete flow at grid indices s <= u <= t."""
    if not s <= u <= t:
        raise InvalidArgument("need s <= u <= t")
    direct = flow_map(spec, x0, path, s, t)
    composed = flow_map(spec, flow_map(spec, x0, path, s, u), path, u, t)
    ident = flow_map(spec, x0, path, s, s)
    return FlowPropertyReport(float(np.max(np.abs(composed - direct))),
                              float(np.max(np.abs(ident - np.asarray(x0, dtype=float)))))


@dataclass
class FDCheck:
    analytic: np.ndarray
    finite_difference: np.ndarray

    @property
    def rel_error(self) -> float:
        return float(np.linalg.norm(self.analytic - self.finite_difference) /
                     max(np.linalg.norm(self.finite_difference), 1e-300))


def jacobian_fd_check(spec: DriftSpec, x0, path: BrownianPath, direction, eps: float = 1e-4) -> FDCheck:
    """J(0, T) h against the centred difference of the terminal state."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    h = np.asarray(direction, dtype=float)
    jet = variational_flow(spec, solve_forward(spec, x0, path), 0, hessian=False)
    fd = (solve_forward(spec, x0 + eps * h, path).terminal - solve_forward(spec, x0 - eps * h, path).terminal) / (2 * eps)
    return FDCheck(jet.J(path.grid.n_steps) @ h, fd)


def hessian_fd_check(spec: DriftSpec, x0, path: BrownianPath, direction, eps: float = 1e-3) -> FDCheck:
    """H(0, T)[h, h] against the second centred difference of the terminal state."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    h = np.asarray(direction, dtype=float)
    jet = variational_flow(spec, solve_forward(spec, x0, path), 0, hessian=True)
    xp = solve_forward(spec, x0 + eps * h, path).terminal
    xm = solve_forward(spec, x0 - eps * h, path).terminal
    xc = solve_forward(spec, x0, path).terminal
    return FDCheck(np.einsum("iac,a,c->i", jet.H(path.grid.n_steps), h, h), (xp - 2 * xc + xm) / eps**2)
