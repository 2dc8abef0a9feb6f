"""Drift coefficients with spatial derivatives up to a declared order.

A :class:`DriftSpec` bundles ``b(t, x)`` with its derivative tensors
``D^j b(t, x)`` (``j = 1..k``), a linear-growth constant and sup-norm bounds
on the derivatives. Evaluation is vectorised: ``x`` has shape ``(..., d)`` and
``D^j b`` has shape ``(..., d, d, ..., d)`` with ``j + 1`` trailing axes, the
first one indexing the output component.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import CapabilityError, InvalidArgument


@dataclass(frozen=True)
class DriftSpec:
    name: str
    d: int
    k: int
    func: Callable
    derivs: tuple  # derivs[j-1] evaluates D^j b, j = 1..k
    linear_growth_C: float
    deriv_bounds: tuple  # deriv_bounds[0] = sup|b| (inf if unbounded), [j] = sup||D^j b||
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.k < 1:
            raise InvalidArgument("drift needs d >= 1 and k >= 1")
        if len(self.derivs) < self.k or len(self.deriv_bounds) < self.k + 1:
            raise InvalidArgument("derivative evaluators/bounds missing for declared k")
        if not self.linear_growth_C > 0:
            raise InvalidArgument("linear_growth_C must be > 0")

    def __call__(self, t, x):
        return self.func(t, np.asarray(x, dtype=float))

    def derivative(self, j: int, t, x):
        if j < 1:
            raise InvalidArgument("derivative order must be >= 1")
        if j > self.k:
            raise CapabilityError(
                f"drift '{self.name}' has smoothness k={self.k}; derivative of order {j} needs k >= {j}")
        return self.derivs[j - 1](t, np.asarray(x, dtype=float))

    def require(self, k: int, what: str) -> None:
        if self.k < k:
            raise CapabilityError(f"{what} requires drift smoothness k >= {k}; drift '{self.name}' has k={self.k}")

    @property
    def sup_norm(self) -> float:
        return self.deriv_bounds[0]


def _diag(vals: np.ndarray, j: int) -> np.ndarray:
    """Tensor of order j+1 with ``vals[..., i]`` on the full diagonal."""
    d = vals.shape[-1]
    out = np.zeros(vals.shape + (d,) * j)
    idx = np.arange(d)
    out[(Ellipsis,) + (idx,) * (j + 1)] = vals
    return out


def componentwise(name, d, fns, growth_C, bounds, params=None) -> DriftSpec:
    """Drift acting coordinate-wise as ``b_i(x) = f(x_i)``; ``fns[j]`` is ``f^{(j)}``."""
    f0 = fns[0]
    derivs = tuple((lambda t, x, fj=fj, j=j: _diag(fj(x), j)) for j, fj in enumerate(fns[1:], start=1))
    return DriftSpec(name=name, d=d, k=len(fns) - 1, func=lambda t, x: f0(x), derivs=derivs,
                     linear_growth_C=growth_C, deriv_bounds=tuple(bounds), params=dict(params or {}))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _bump_profile(y, upto=3):
    """e * exp(-1/(1-y^2)) on |y| < 1 and its derivatives up to ``upto`` (max value 1)."""
    y = np.asarray(y, dtype=float)
    inside = np.abs(y) < 1.0
    ys = np.where(inside, y, 0.0)
    q = 1.0 - ys * ys
    e = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
    out = [e]
    if upto >= 1:
        g1 = -2.0 * ys / q**2
        out.append(e * g1)
    if upto >= 2:
        g2 = -2.0 / q**2 - 8.0 * ys**2 / q**3
        out.append(e * (g2 + g1**2))
    if upto >= 3:
        g3 = -24.0 * ys / q**3 - 48.0 * ys**3 / q**4
        out.append(e * (g3 + 3 * g1 * g2 + g1**3))
    return tuple(out)


_BUMP_SUP = None


def _bump_sups():
    global _BUMP_SUP
    if _BUMP_SUP is None:
        y = np.linspace(-1, 1, 200001)
        _BUMP_SUP = tuple(float(np.max(np.abs(v))) for v in _bump_profile(y))
    return _BUMP_SUP


def builtin_drift(name: str, params: dict | None = None) -> DriftSpec:
    """Construct one of the shipped drift families.

    ``zero``, ``const`` (``c``), ``ou`` (``theta``), ``relu``, ``softplus``
    (``a``, ``c``: ``b = a log(1 + e^{x-c})``) and ``bump`` (``amp``,
    ``center``, ``radius``; one-dimensional). All accept ``d`` except ``bump``.
    """
    p = dict(params or {})
    d = int(p.pop("d", 1))
    if name == "zero":
        k = int(p.pop("k", 4))
        fns = [lambda x: np.zeros_like(x)] * (k + 1)
        return componentwise("zero", d, fns, 1.0, [0.0] * (k + 1), {"d": d})
    if name == "const":
        c = np.broadcast_to(np.asarray(p.pop("c", 1.0), dtype=float), (d,)).copy()
        k = int(p.pop("k", 4))
        fns = [lambda x: np.broadcast_to(c, x.shape).copy()] + [lambda x: np.zeros_like(x)] * k
        cn = float(np.linalg.norm(c))
        return componentwise("const", d, fns, max(cn, 1e-300), [cn] + [0.0] * k, {"d": d, "c": c.tolist()})
    if name == "ou":
        theta = float(p.pop("theta", 1.0))
        k = int(p.pop("k", 4))
        fns = [lambda x: -theta * x, lambda x: np.full_like(x, -theta)] + [lambda x: np.zeros_like(x)] * (k - 1)
        return componentwise("ou", d, fns, max(abs(theta), 1e-300), [math.inf, abs(theta)] + [0.0] * (k - 1),
                             {"d": d, "theta": theta})
    if name == "relu":
        fns = [lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float)]
        return componentwise("relu", d, fns, 1.0, [math.inf, 1.0], {"d": d})
    if name == "softplus":
        a = float(p.pop("a", 1.0))
        c = float(p.pop("c", 0.0))

        def s0(x):
            return a * np.logaddexp(0.0, x - c)

        def s1(x):
            return a * _sigmoid(x - c)

        def s2(x):
            s = _sigmoid(x - c)
            return a * s * (1 - s)

        def s3(x):
            s = _sigmoid(x - c)
            return a * s * (1 - s) * (1 - 2 * s)

        def s4(x):
            s = _sigmoid(x - c)
            return a * s * (1 - s) * (1 - 6 * s + 6 * s * s)

        aa = abs(a)
        growth = aa * max(1.0, abs(c) + math.log(2.0))
        return componentwise("softplus", d, [s0, s1, s2, s3, s4], growth,
                             [math.inf, aa, aa / 4, aa / (6 * math.sqrt(3)), aa / 8], {"d": d, "a": a, "c": c})
    if name == "bump":
        if d != 1:
            raise InvalidArgument("the bump family is one-dimensional")
        amp = float(p.pop("amp", 1.0))
        center = float(p.pop("center", 0.0))
        radius = float(p.pop("radius", 1.0))
        if radius <= 0:
            raise InvalidArgument("bump radius must be > 0")
        fns = [(lambda x, j=j: amp * _bump_profile((x - center) / radius, j)[j] / radius**j) for j in range(4)]
        sups = _bump_sups()
        bounds = [abs(amp) * sups[j] / radius**j for j in range(4)]
        return componentwise("bump", 1, fns, max(abs(amp), 1e-300), bounds,
                             {"amp": amp, "center": center, "radius": radius})
    raise InvalidArgument(f"unknown drift family '{name}'")


def tensor_norm(T: np.ndarray, order: int) -> np.ndarray:
    """Max over output components of the Frobenius norm of ``T[..., i, :, ...]``."""
    axes = tuple(range(-order, 0))
    return np.sqrt(np.sum(T * T, axis=axes)).max(axis=-1)


@dataclass
class HypothesisReport:
    growth_ratio: float
    deriv_max: list
    declared_C: float
    declared_bounds: list
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures


def validate_hypotheses(spec: DriftSpec, probe_box=(-10.0, 10.0), n_probes: int = 2000,
                        seed: int = 0, t: float = 0.0) -> HypothesisReport:
    """Probe linear growth and derivative bounds on random points of a box."""
    lo = np.broadcast_to(np.asarray(probe_box[0], dtype=float), (spec.d,))
    hi = np.broadcast_to(np.asarray(probe_box[1], dtype=float), (spec.d,))
    if np.any(hi < lo):
        raise InvalidArgument("empty probe box")
    rng = np.random.default_rng(seed)
    x = lo + (hi - lo) * rng.random((n_probes, spec.d))
    x = np.vstack([x, lo, hi, np.clip(np.zeros(spec.d), lo, hi)])
    bx = spec(t, x)
    growth = float(np.max(np.linalg.norm(bx, axis=-1) / (1.0 + np.linalg.norm(x, axis=-1))))
    derivs = [float(tensor_norm(spec.derivative(j, t, x), j).max()) for j in range(1, spec.k + 1)]
    failures = []
    slack = 1e-9
    if growth > spec.linear_growth_C * (1 + slack):
        failures.append(f"growth ratio {growth:.6g} exceeds C={spec.linear_growth_C:.6g}")
    for j, v in enumerate(derivs, start=1):
        if v > spec.deriv_bounds[j] * (1 + slack) + slack:
            failures.append(f"|D^{j} b| reaches {v:.6g} > declared {spec.deriv_bounds[j]:.6g}")
    return HypothesisReport(growth, derivs, spec.linear_growth_C, list(spec.deriv_bounds[1:]), failures)


def fd_consistency(spec: DriftSpec, x, direction, hs: Sequence[float], t: float = 0.0) -> np.ndarray:
    """``|D b(x) h - (b(x+h) - b(x-h))/2|`` for each step length in ``hs``."""
    x = np.asarray(x, dtype=float)
    e = np.asarray(direction, dtype=float)
    J = spec.derivative(1, t, x)
    out = []
    for h in hs:
        fd = (spec(t, x + h * e) - spec(t, x - h * e)) / 2.0
        out.append(float(np.linalg.norm(J @ (h * e) - fd)))
    return np.array(out)


@dataclass(frozen=True)
class DerivativeWord:
    """A product of factors ``D^{alpha_i} b_i`` with each ``|alpha_i| <= 1``."""

    alphas: tuple
    factors: tuple

    def __post_init__(self):
        if len(self.alphas) < 1 or len(self.alphas) != len(self.factors):
            raise InvalidArgument("word needs matching, non-empty alphas and factors")
        for a, f in zip(self.alphas, self.factors):
            a = tuple(a)
            if len(a) != f.d or any(v not in (0, 1) for v in a) or sum(a) > 1:
                raise InvalidArgument(f"multi-index {a} must lie in {{0,1}}^d with |alpha| <= 1")

    @property
    def m(self) -> int:
        return len(self.alphas)

    def evaluate(self, i: int, t, x) -> np.ndarray:
        """Value of the i-th factor (first output component) at points ``x`` of shape (..., d)."""
        a = tuple(self.alphas[i])
        f = self.factors[i]
        if sum(a) == 0:
            return f(t, x)[..., 0]
        return f.derivative(1, t, x)[..., 0, a.index(1)]

    def sup_norms(self) -> list:
        return [f.sup_norm for f in self.factors]


def with_bounds(spec: DriftSpec, **changes) -> DriftSpec:
    return replace(spec, **changes)
