"""Shuffle permutations, iterated integrals over ordered simplices, the
shuffle product identities, and the Brownian moment-bound statistic.

Simplex integrals of product integrands ``f_1(u_1) ... f_m(u_m)`` over
``s < u_1 < ... < u_m < t`` are computed by nested cumulative quadrature. The
exact rational oracle :func:`exact_simplex_integral` integrates polynomial
factors symbolically with :class:`fractions.Fraction` coefficients.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import mc
from .drift import DerivativeWord
from .errors import InvalidArgument
from .paths import TimeGrid, sample_increments

MAX_ENUMERATION = 12
MAX_IDENTITY_ORDER = 6
MAX_WORD = 8


@dataclass(frozen=True)
class ShuffleSet:
    m: int
    n: int
    permutations: tuple  # each a tuple (sigma(1), ..., sigma(m+n)), 1-based
    k: int | None = None

    def __len__(self):
        return len(self.permutations)


def enumerate_shuffles(m: int, n: int, k: int | None = None) -> ShuffleSet:
    """All sigma in S(m, n), or the pinned subset S_k(m, n) when ``k`` is given.

    Elements ``1..m`` form the first block and ``m+1..m+n`` the second. In the
    pinned variant the second block must sit below first-block element ``k+1``
    (element ``m+1`` of the first block standing for the upper bound ``t``), so
    ``sigma(j) = n + j`` for ``j = k+1..m``; ``k = m`` gives all of S(m, n).
    """
    if m < 0 or n < 0:
        raise InvalidArgument("m and n must be non-negative")
    if m + n > MAX_ENUMERATION:
        raise InvalidArgument(f"m + n = {m + n} exceeds the enumeration guard {MAX_ENUMERATION}")
    if k is not None and not 0 <= k <= m:
        raise InvalidArgument("pin index must satisfy 0 <= k <= m")
    total = m + n
    perms = []
    for first in itertools.combinations(range(1, total + 1), m):
        if k is not None and any(first[j - 1] != n + j for j in range(k + 1, m + 1)):
            continue
        rest = tuple(p for p in range(1, total + 1) if p not in first)
        perms.append(first + rest)
    return ShuffleSet(m, n, tuple(perms), k)


class Poly:
    """Polynomial with exact rational coefficients (ascending powers)."""

    def __init__(self, coeffs):
        c = [Fraction(v) for v in coeffs] or [Fraction(0)]
        while len(c) > 1 and c[-1] == 0:
            c.pop()
        self.c = c

    def __mul__(self, other: "Poly") -> "Poly":
        out = [Fraction(0)] * (len(self.c) + len(other.c) - 1)
        for i, a in enumerate(self.c):
            for j, b in enumerate(other.c):
                out[i + j] += a * b
        return Poly(out)

    def antiderivative_from(self, a) -> "Poly":
        """``x -> int_a^x self(v) dv``."""
        c = [Fraction(0)] + [v / (i + 1) for i, v in enumerate(self.c)]
        P = Poly(c)
        return Poly([c[0] - P.exact(a)] + c[1:])

    def exact(self, x) -> Fraction:
        x = Fraction(x)
        acc = Fraction(0)
        for v in reversed(self.c):
            acc = acc * x + v
        return acc

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        acc = np.zeros_like(x)
        for v in reversed(self.c):
            acc = acc * x + float(v)
        return acc

    def __repr__(self):
        return f"Poly({[str(v) for v in self.c]})"


def _exact_chain(factors: Sequence[Poly], s, pin=None) -> Poly:
    """``x -> int_{s<u_1<..<u_m<x} prod f_i(u_i)`` symbolically; ``pin=(i, P)`` multiplies factor i by P."""
    acc = Poly([1])
    for i, f in enumerate(factors):
        g = f * pin[1] if pin is not None and pin[0] == i else f
        acc = (g * acc).antiderivative_from(s)
    return acc


def exact_simplex_integral(factors: Sequence[Poly], s, t) -> Fraction:
    return _exact_chain(factors, Fraction(s)).exact(Fraction(t))


# numeric quadrature ----------------------------------------------------------

_METHODS = ("left", "trapezoid", "richardson", "richardson-left")


def _cumulative(g: np.ndarray, h: float, rule: str) -> np.ndarray:
    out = np.zeros_like(g)
    if rule == "left":
        np.cumsum(g[..., :-1] * h, axis=-1, out=out[..., 1:])
    else:
        np.cumsum(0.5 * h * (g[..., :-1] + g[..., 1:]), axis=-1, out=out[..., 1:])
    return out


def chain_on_grid(values: Sequence[np.ndarray], h: float, rule: str = "trapezoid", pin=None) -> np.ndarray:
    """Cumulative simplex integral ``I_m(x_j)`` from factor values on a uniform grid.

    ``values[i]`` has shape (..., N + 1); ``pin=(i, P)`` multiplies factor i
    pointwise by the grid function ``P``.
    """
    acc = None
    for i, f in enumerate(values):
        g = f * pin[1] if pin is not None and pin[0] == i else f
        g = g if acc is None else g * acc
        acc = _cumulative(np.asarray(g, dtype=float), h, rule)
    return acc


@dataclass(frozen=True)
class SimplexIntegral:
    s: float
    t: float
    m: int
    value: float
    n_sub: int
    method: str
    richardson_delta: float = 0.0  # |I(n_sub) - I(2 n_sub)| for the base rule


def _as_factors(f_factors, m):
    if callable(f_factors):
        if m is None:
            raise InvalidArgument("m is required with a single factor")
        return [f_factors] * m
    f_factors = list(f_factors)
    if m is not None and len(f_factors) != m:
        raise InvalidArgument(f"expected {m} factors, got {len(f_factors)}")
    return f_factors


def _quad_value(evaluate: Callable[[np.ndarray, float], float], s, t, n_sub, method):
    """Apply ``method`` to a functional evaluated on grids of n_sub (and 2 n_sub) cells."""
    base = "left" if method in ("left", "richardson-left") else "trapezoid"
    x1 = np.linspace(s, t, n_sub + 1)
    v1 = evaluate(x1, (t - s) / n_sub, base)
    x2 = np.linspace(s, t, 2 * n_sub + 1)
    v2 = evaluate(x2, (t - s) / (2 * n_sub), base)
    delta = abs(v2 - v1)
    if method == "richardson":
        return (4 * v2 - v1) / 3, delta
    if method == "richardson-left":
        return 2 * v2 - v1, delta
    return v1, delta


def simplex_quad(f_factors, s: float, t: float, m: int | None = None, n_sub: int = 1000,
                 method: str = "trapezoid") -> SimplexIntegral:
    """``int_{s<u_1<...<u_m<t} prod f_i(u_i) du`` by nested cumulative quadrature.

    ``method`` is ``left`` (O(1/n_sub)), ``trapezoid`` (O(1/n_sub^2)) or a
    Richardson-extrapolated variant; the reported delta compares n_sub with
    2 n_sub for the base rule.
    """
    if method not in _METHODS:
        raise InvalidArgument(f"method must be one of {_METHODS}")
    if n_sub < 1:
        raise InvalidArgument("n_sub must be >= 1")
    factors = _as_factors(f_factors, m)
    m = len(factors)
    if m == 0:
        return SimplexIntegral(s, t, 0, 1.0, n_sub, method)

    def evaluate(x, h, rule):
        return float(chain_on_grid([np.broadcast_to(f(x), x.shape) for f in factors], h, rule)[-1])

    value, delta = _quad_value(evaluate, s, t, n_sub, method)
    return SimplexIntegral(s, t, m, value, n_sub, method, delta)


def _arrange(sigma, first, second):
    """Factor list on positions 1..m+n: ``first[i]`` at sigma(i), ``second[i]`` at sigma(m+i)."""
    m = len(first)
    out = [None] * len(sigma)
    for i, f in enumerate(first):
        out[sigma[i] - 1] = f
    for i, g in enumerate(second):
        out[sigma[m + i] - 1] = g
    return out


@dataclass
class ShuffleResidual:
    m: int
    n: int
    lhs: float
    rhs: float
    budget: float
    k: int | None = None
    exact: Fraction | None = None
    n_terms: int = 0

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def oracle_residual(self) -> float | None:
        if self.exact is None:
            return None
        e = float(self.exact)
        return max(abs(self.lhs - e), abs(self.rhs - e))


def _all_poly(fs):
    return all(isinstance(f, Poly) for f in fs)


def verify_shuffle_identity(f, g, m: int, n: int, s: float = 0.0, t: float = 1.0, n_sub: int = 4000,
                            method: str = "richardson") -> ShuffleResidual:
    """Both sides of the shuffle product identity for product-form integrands.

    ``f`` and ``g`` are lists of univariate factors (or one callable repeated).
    With :class:`Poly` factors and rational-representable bounds the exact
    common value is attached.
    """
    if m + n > MAX_IDENTITY_ORDER:
        raise InvalidArgument(f"m + n must be <= {MAX_IDENTITY_ORDER}")
    fs, gs = _as_factors(f, m), _as_factors(g, n)
    qa = simplex_quad(fs, s, t, n_sub=n_sub, method=method) if m else SimplexIntegral(s, t, 0, 1.0, n_sub, method)
    qb = simplex_quad(gs, s, t, n_sub=n_sub, method=method) if n else SimplexIntegral(s, t, 0, 1.0, n_sub, method)
    lhs = qa.value * qb.value
    shuffles = enumerate_shuffles(m, n)
    rhs, budget = 0.0, abs(qa.value) * qb.richardson_delta + abs(qb.value) * qa.richardson_delta
    terms = []
    for sigma in shuffles.permutations:
        q = simplex_quad(_arrange(sigma, fs, gs), s, t, n_sub=n_sub, method=method) if m + n else None
        terms.append(q.value if q else 1.0)
        budget += q.richardson_delta if q else 0.0
    rhs = math.fsum(terms)
    exact = None
    if _all_poly(fs) and _all_poly(gs):
        S, T = Fraction(s), Fraction(t)
        exact = exact_simplex_integral(fs, S, T) * exact_simplex_integral(gs, S, T)
        exact_rhs = sum((exact_simplex_integral(_arrange(sig, fs, gs), S, T) for sig in shuffles.permutations),
                        Fraction(0))
        if exact != exact_rhs:
            raise AssertionError(f"exact shuffle identity failed: {exact} != {exact_rhs}")
    return ShuffleResidual(m, n, lhs, rhs, budget, None, exact, len(shuffles))


def verify_shuffle2_identity(f_list, k: int, m: int, n: int, s: float = 0.0, t: float = 1.0, n_sub: int = 4000,
                             method: str = "richardson") -> ShuffleResidual:
    """Pinned shuffle identity.

    LHS: outer variables ``s < u_1 < ... < u_m < t`` carrying
    ``f_list[n:]``, inner variables ``s < v_1 < ... < v_n < u_{k+1}`` carrying
    ``f_list[:n]`` (``u_{m+1} = t``). RHS: sum over S_k(m, n) of single
    (m+n)-simplex integrals. ``k = m`` recovers the plain shuffle identity.
    """
    if m + n > MAX_IDENTITY_ORDER:
        raise InvalidArgument(f"m + n must be <= {MAX_IDENTITY_ORDER}")
    if not 0 <= k <= m:
        raise InvalidArgument("pin index must satisfy 0 <= k <= m")
    f_list = list(f_list)
    if len(f_list) != m + n:
        raise InvalidArgument(f"expected {m + n} factors")
    vs, us = f_list[:n], f_list[n:]

    def lhs_eval(x, h, rule):
        inner = chain_on_grid([np.broadcast_to(f(x), x.shape) for f in vs], h, rule) if n else np.ones_like(x)
        if m == 0:
            return float(inner[-1])
        uvals = [np.broadcast_to(f(x), x.shape) for f in us]
        if k == m:
            return float(chain_on_grid(uvals, h, rule)[-1] * inner[-1])
        return float(chain_on_grid(uvals, h, rule, pin=(k, inner))[-1])

    lhs, budget = _quad_value(lhs_eval, s, t, n_sub, method)
    shuffles = enumerate_shuffles(m, n, k)
    terms = []
    for sigma in shuffles.permutations:
        q = simplex_quad(_arrange(sigma, us, vs), s, t, n_sub=n_sub, method=method) if m + n else None
        terms.append(q.value if q else 1.0)
        budget += q.richardson_delta if q else 0.0
    rhs = math.fsum(terms)
    exact = None
    if _all_poly(f_list):
        S, T = Fraction(s), Fraction(t)
        inner = _exact_chain(vs, S)
        if k == m:
            exact = _exact_chain(us, S).exact(T) * inner.exact(T)
        else:
            exact = _exact_chain(us, S, pin=(k, inner)).exact(T)
        exact_rhs = sum((exact_simplex_integral(_arrange(sig, us, vs), S, T) for sig in shuffles.permutations),
                        Fraction(0))
        if exact != exact_rhs:
            raise AssertionError(f"exact pinned shuffle identity failed: {exact} != {exact_rhs}")
    return ShuffleResidual(m, n, lhs, rhs, budget, k, exact, len(shuffles))


# moment bound ----------------------------------------------------------------

@dataclass
class BoundStatistic:
    m: int
    lhs: float
    se: float
    rhs_core: float
    signed_mean: float

    @property
    def ratio_root(self) -> float:
        return (self.lhs / self.rhs_core) ** (1.0 / self.m)

    @property
    def ratio_root_se(self) -> float:
        if self.lhs == 0:
            return math.inf
        return self.ratio_root * self.se / (self.m * self.lhs)


def rhs_core(sup_norms, t0: float, t: float) -> float:
    m = len(sup_norms)
    log = sum(math.log(v) for v in sup_norms) + 0.5 * m * math.log(t - t0) - math.lgamma(0.5 * m + 1)
    return math.exp(log)


def check_moment_bound(word: DerivativeWord, t0: float, t: float, n_paths: int = 100_000, n_sub: int = 256,
                       seed: int = 0, workers: int | None = None) -> BoundStatistic:
    """Monte Carlo estimate of ``|E int_{simplex} prod D^{alpha_i} b_i(t_i, B_{t_i}) dt|``.

    Left-point nested quadrature along each Brownian path started at 0 at t0.
    """
    m = word.m
    if m > MAX_WORD:
        raise InvalidArgument(f"word length {m} exceeds {MAX_WORD}")
    norms = word.sup_norms()
    if not all(math.isfinite(v) and v > 0 for v in norms):
        raise InvalidArgument("moment bound needs bounded, non-zero factors")
    d = word.factors[0].d
    grid = TimeGrid(float(t0), float(t), int(n_sub))
    nodes, h = grid.nodes, grid.dt

    def chunk(start, count):
        dB = sample_increments(seed, grid, d, start, count)
        B = np.concatenate([np.zeros((count, 1, d)), np.cumsum(dB, axis=1)], axis=1)
        cache = {}
        vals = []
        for i in range(m):
            key = (id(word.factors[i]), tuple(word.alphas[i]))
            if key not in cache:
                cache[key] = word.evaluate(i, nodes[None, :], B)
            vals.append(cache[key])
        return chain_on_grid(vals, h, "left")[:, -1]

    v = mc.map_paths(chunk, n_paths, workers=workers)
    est = mc.mean_se(v)
    return BoundStatistic(m, abs(est.mean), est.se, rhs_core(norms, t0, t), est.mean)
