"""State-space change of variables turning ``dX = b dt + sigma(X) dB`` into an
additive-noise equation ``dY = b_*(Y) dt + dB`` with ``Y = Lambda(X)``.

In one dimension ``Lambda(x) = int_{x_a}^x du / sigma(u)`` and
``b_*(y) = (b / sigma - sigma' / 2)(Lambda^{-1}(y))``. Higher dimensions are
supported through user-supplied maps only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import mc
from .density import estimate_density, kde_baseline
from .drift import DriftSpec, builtin_drift
from .errors import DomainError, InvalidArgument
from .paths import TimeGrid, sample_increments
from .sde import euler

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


@dataclass(frozen=True)
class SigmaSpec:
    """Scalar diffusion coefficient with derivatives ``derivs[j] = sigma^{(j)}``, j = 0..4."""
    name: str
    derivs: tuple
    sigma_min: float
    sigma_max: float
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.derivs[0](np.asarray(x, dtype=float))

    def derivative(self, j: int, x):
        return self.derivs[j](np.asarray(x, dtype=float))


def builtin_sigma(name: str, params: dict | None = None) -> SigmaSpec:
    """``const`` (``sigma0``) or ``sin2``: ``sigma(x) = 2 + sin x``."""
    p = dict(params or {})
    if name == "const":
        s0 = float(p.get("sigma0", 1.0))
        if s0 <= 0:
            raise DomainError("non-elliptic diffusion: sigma0 must be > 0")
        zero = lambda x: np.zeros_like(x)
        return SigmaSpec("const", (lambda x: np.full_like(x, s0), zero, zero, zero, zero), s0, s0, {"sigma0": s0})
    if name == "sin2":
        return SigmaSpec("sin2", (lambda x: 2.0 + np.sin(x), np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x),
                                  np.sin), 1.0, 3.0, {})
    raise InvalidArgument(f"unknown sigma family '{name}'")


@dataclass(frozen=True)
class LampertiMap:
    """A C^2 bijection with ``jac(y) @ sigma(y) = I``.

    Arrays are shaped (..., d); ``jac`` returns (..., d, d) and ``hess``
    (..., d, d, d) with the output component first.
    """
    d: int
    forward: Callable
    jac: Callable
    hess: Callable
    inverse: Callable
    lipschitz_inv: float
    anchor: np.ndarray
    sigma: Callable | None = None  # (..., d) -> (..., d, d)

    @classmethod
    def from_callables(cls, d, forward, jac, hess, inverse, lipschitz_inv, sigma=None, anchor=None):
        """Wrap a user-supplied multidimensional map; its existence is the caller's hypothesis."""
        a = np.zeros(d) if anchor is None else np.asarray(anchor, dtype=float)
        return cls(int(d), forward, jac, hess, inverse, float(lipschitz_inv), a, sigma)


class _Map1D:
    """Tabulated ``Lambda`` on a working box: exact cumulative panel values plus
    a Gauss-Legendre integral over the partial panel."""

    def __init__(self, sigma: SigmaSpec, anchor: float, box, h: float):
        self.sigma = sigma
        self.anchor = float(anchor)
        self.h = float(h)
        lo, hi = float(box[0]), float(box[1])
        n_lo = math.ceil((self.anchor - lo) / h)
        n_hi = math.ceil((hi - self.anchor) / h)
        self.x_tab = self.anchor + h * np.arange(-n_lo, n_hi + 1)
        s = self.sigma(self.x_tab)
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise DomainError(f"non-elliptic diffusion: sigma '{sigma.name}' is not positive on the working box")
        panel = self._panel(self.x_tab[:-1], np.full(len(self.x_tab) - 1, h))
        cum = np.concatenate([[0.0], np.cumsum(panel)])
        self.L_tab = cum - cum[n_lo]
        self.lo, self.hi = self.x_tab[0], self.x_tab[-1]

    def _panel(self, a, length):
        mid = a + 0.5 * length
        half = 0.5 * length
        pts = mid[..., None] + half[..., None] * _GL_NODES
        return half * np.sum(_GL_WEIGHTS / self.sigma(pts), axis=-1)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.lo) or np.any(x > self.hi):
            raise DomainError(f"point outside the map's working box [{self.lo}, {self.hi}]")
        i = np.clip(np.floor((x - self.lo) / self.h).astype(int), 0, len(self.x_tab) - 2)
        a = self.x_tab[i]
        return self.L_tab[i] + self._panel(a, x - a)

    def inverse(self, y, tol: float = 1e-12, max_iter: int = 60):
        """Newton on ``Lambda(x) = y`` safeguarded by bisection on a monotone bracket."""
        y = np.asarray(y, dtype=float)
        if np.any(y < self.L_tab[0]) or np.any(y > self.L_tab[-1]):
            raise DomainError("value outside the range of the map on its working box")
        j = np.clip(np.searchsorted(self.L_tab, y) - 1, 0, len(self.x_tab) - 2)
        lo, hi = self.x_tab[j], self.x_tab[j + 1]
        x = np.interp(y, self.L_tab, self.x_tab)
        for _ in range(max_iter):
            f = self.forward(x) - y
            lo = np.where(f < 0, x, lo)
            hi = np.where(f > 0, x, hi)
            xn = x - f * self.sigma(x)
            bad = (xn < lo) | (xn > hi)
            xn = np.where(bad, 0.5 * (lo + hi), xn)
            step = np.abs(xn - x)
            x = xn
            if np.all(step <= tol * (1.0 + np.abs(x))):
                break
        return x


def build_map_1d(sigma: SigmaSpec, anchor: float = 0.0, box=(-100.0, 100.0), h: float = 1.0 / 16) -> LampertiMap:
    """``Lambda(x) = int_{anchor}^x du / sigma(u)`` with inverse accurate to about 1e-12."""
    if not sigma.sigma_min > 0:
        raise DomainError("non-elliptic diffusion: declared sigma_min must be > 0")
    m = _Map1D(sigma, anchor, box, h)

    def fwd(x):
        return m.forward(np.asarray(x)[..., 0])[..., None]

    def inv(y):
        return m.inverse(np.asarray(y)[..., 0])[..., None]

    def jac(x):
        return (1.0 / sigma(np.asarray(x)[..., 0]))[..., None, None]

    def hess(x):
        x = np.asarray(x)[..., 0]
        return (-sigma.derivative(1, x) / sigma(x) ** 2)[..., None, None, None]

    return LampertiMap(1, fwd, jac, hess, inv, sigma.sigma_max, np.array([float(anchor)]),
                       lambda x: sigma(np.asarray(x)[..., 0])[..., None, None])


@dataclass
class MapCheck:
    sigma_identity: float
    roundtrip: float
    lipschitz_ratio: float

    @property
    def passed(self) -> bool:
        return self.sigma_identity <= 1e-10 and self.roundtrip <= 1e-10 and self.lipschitz_ratio <= 1.0 + 1e-9


def check_map(lmap: LampertiMap, probes) -> MapCheck:
    """Defects of ``Lambda_x sigma = I``, of the round trip, and the worst Lipschitz ratio of the inverse."""
    x = np.asarray(probes, dtype=float).reshape(-1, lmap.d)
    ident = 0.0
    if lmap.sigma is not None:
        ident = float(np.max(np.abs(np.einsum("kij,kjl->kil", lmap.jac(x), lmap.sigma(x)) - np.eye(lmap.d))))
    rt = float(np.max(np.abs(lmap.inverse(lmap.forward(x)) - x) / (1.0 + np.abs(x))))
    y = lmap.forward(x)
    a, b = y[:-1], y[1:]
    num = np.linalg.norm(lmap.inverse(a) - lmap.inverse(b), axis=-1)
    den = np.linalg.norm(a - b, axis=-1)
    ok = den > 0
    ratio = float(np.max(num[ok] / (lmap.lipschitz_inv * den[ok]))) if np.any(ok) else 0.0
    return MapCheck(ident, rt, ratio)


def _g_derivs(b: DriftSpec, sigma: SigmaSpec, t, z, upto: int):
    """``g = b/sigma - sigma'/2`` and its z-derivatives up to ``upto``."""
    zc = z[..., None]
    B = [b(t, zc)[..., 0]] + [b.derivative(j, t, zc).reshape(z.shape) for j in range(1, upto + 1)]
    S = [sigma.derivative(j, z) for j in range(upto + 2)]
    r0 = 1.0 / S[0]
    R = [r0]
    if upto >= 1:
        R.append(-S[1] * r0**2)
    if upto >= 2:
        R.append(-S[2] * r0**2 + 2 * S[1] ** 2 * r0**3)
    if upto >= 3:
        R.append(-S[3] * r0**2 + 6 * S[1] * S[2] * r0**3 - 6 * S[1] ** 3 * r0**4)
    binom = [[1], [1, 1], [1, 2, 1], [1, 3, 3, 1]]
    return [sum(binom[j][i] * B[j - i] * R[i] for i in range(j + 1)) - 0.5 * S[j + 1] for j in range(upto + 1)]


def _bstar_derivs(b, sigma, t, z, upto):
    """Derivatives in y of ``g(z(y))`` with ``z' = sigma(z)`` (Faa di Bruno, order <= 3)."""
    g = _g_derivs(b, sigma, t, z, upto)
    s0 = sigma(z)
    out = [g[0]]
    if upto >= 1:
        out.append(g[1] * s0)
    if upto >= 2:
        s1 = sigma.derivative(1, z)
        z2 = s0 * s1
        out.append(g[2] * s0**2 + g[1] * z2)
    if upto >= 3:
        s2 = sigma.derivative(2, z)
        z3 = s0 * (s1**2 + s0 * s2)
        out.append(g[3] * s0**3 + 3 * g[2] * s0 * z2 + g[1] * z3)
    return out


def transform_drift(lmap: LampertiMap, b: DriftSpec, sigma: SigmaSpec, n_probe: int = 200001) -> DriftSpec:
    """Additive-noise drift ``b_*`` with analytic derivatives up to ``min(3, b.k)`` (d = 1).

    Sup-norm bounds of ``b_*`` and its derivatives, and the linear-growth
    constant, are measured on a dense grid of the map's working box.
    """
    if lmap.d != 1 or b.d != 1:
        raise InvalidArgument("transform_drift handles d = 1; use transform_drift_nd for user maps")
    k = min(3, b.k)
    cache = {}

    def z_of(x):
        y = np.asarray(x, dtype=float)[..., 0]
        # one tuple slot so concurrent workers never pair one thread's y with another's z
        hit = cache.get("yz")
        if hit is not None and hit[0].shape == y.shape and np.array_equal(hit[0], y):
            return hit[1]
        z = lmap.inverse(y[..., None])[..., 0]
        cache["yz"] = (y.copy(), z)
        return z

    def func(t, x):
        return _bstar_derivs(b, sigma, t, z_of(x), 0)[0][..., None]

    def deriv(j):
        return lambda t, x: _bstar_derivs(b, sigma, t, z_of(x), j)[j].reshape(np.shape(x)[:-1] + (1,) * (j + 1))

    yl, yh = lmap.forward(np.array([[lmap.anchor[0] - 90.0], [lmap.anchor[0] + 90.0]]))[:, 0]
    zs = np.linspace(lmap.anchor[0] - 90.0, lmap.anchor[0] + 90.0, n_probe)
    ys = lmap.forward(zs[:, None])[:, 0]
    vals = _bstar_derivs(b, sigma, 0.0, zs, k)
    bounds = [float(np.max(np.abs(v))) * (1 + 1e-6) for v in vals]
    if not math.isfinite(b.deriv_bounds[0]):
        bounds[0] = math.inf
    growth = float(np.max(np.abs(vals[0]) / (1.0 + np.abs(ys)))) * (1 + 1e-6)
    return DriftSpec(f"lamperti[{b.name},{sigma.name}]", 1, k, func, tuple(deriv(j) for j in range(1, k + 1)),
                     max(growth, 1e-300), tuple(bounds),
                     {"b": b.name, "sigma": sigma.name, "box": [float(yl), float(yh)]})


def transform_drift_nd(lmap: LampertiMap, b: Callable, sigma: Callable, contraction: str = "literal",
                       fd_h: float = 1e-5, bounds=None) -> DriftSpec:
    """``b_*`` for a user-supplied map in any dimension; Jacobian by centred differences (k = 1).

    ``contraction="literal"`` uses ``1/2 Lambda_xx[sum_i sigma e_i, sum_i sigma e_i]``;
    ``"ito"`` uses ``1/2 sum_i Lambda_xx[sigma e_i, sigma e_i]``. They agree for d = 1.
    """
    if contraction not in ("literal", "ito"):
        raise InvalidArgument("contraction must be 'literal' or 'ito'")
    d = lmap.d

    def func(t, y):
        x = lmap.inverse(np.asarray(y, dtype=float))
        S = sigma(x)
        H = lmap.hess(x)
        drift = np.einsum("...ij,...j->...i", lmap.jac(x), b(t, x))
        if contraction == "literal":
            v = S.sum(axis=-1)
            corr = np.einsum("...iab,...a,...b->...i", H, v, v)
        else:
            corr = np.einsum("...iab,...ac,...bc->...i", H, S, S)
        return drift + 0.5 * corr

    def jac(t, y):
        y = np.asarray(y, dtype=float)
        cols = []
        for c in range(d):
            e = np.zeros(d)
            e[c] = fd_h
            cols.append((func(t, y + e) - func(t, y - e)) / (2 * fd_h))
        return np.stack(cols, axis=-1)

    bnd = tuple(bounds) if bounds is not None else (math.inf, math.inf)
    return DriftSpec(f"lamperti-nd[{contraction}]", d, 1, func, (jac,), 1.0, bnd, {"contraction": contraction})


def _euler_multiplicative(b: DriftSpec, sigma: SigmaSpec, x0: float, dB: np.ndarray, grid: TimeGrid) -> np.ndarray:
    x = np.full(dB.shape[0], float(x0))
    dt, nodes = grid.dt, grid.nodes
    for j in range(dB.shape[1]):
        x = x + b(nodes[j], x[:, None])[:, 0] * dt + sigma(x) * dB[:, j, 0]
    return x


_TEST_FUNCTIONS = {
    "cos": np.cos,
    "gauss-bump": lambda x: np.exp(-0.5 * x * x),
}


@dataclass
class RouteComparison:
    f: str
    direct: mc.Estimate
    transformed: mc.Estimate
    dt_budget: float

    @property
    def diff(self) -> float:
        return self.transformed.mean - self.direct.mean

    @property
    def combined_se(self) -> float:
        return math.hypot(self.direct.se, self.transformed.se)

    @property
    def passed(self) -> bool:
        return abs(self.diff) <= 3 * self.combined_se + self.dt_budget


@dataclass
class RoundtripReport:
    comparisons: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.comparisons)


def _route_samples(b, sigma, lmap, bstar, x0, grid, seed, n_paths, workers):
    y0 = float(lmap.forward(np.array([[x0]]))[0, 0])

    def direct(start, count):
        return _euler_multiplicative(b, sigma, x0, sample_increments(seed, grid, 1, start, count), grid)

    def transformed(start, count):
        dB = sample_increments(seed + 1, grid, 1, start, count)
        return lmap.inverse(euler(bstar, y0, dB, grid, keep_path=False))[:, 0]

    return mc.map_paths(direct, n_paths, workers=workers), mc.map_paths(transformed, n_paths, workers=workers)


def roundtrip_check(b: DriftSpec, sigma: SigmaSpec, lmap: LampertiMap, x0: float = 0.0, T: float = 1.0,
                    n_paths: int = 100_000, n_steps: int = 1024, seed: int = 0, fs=("cos", "gauss-bump"),
                    budget_const: float = 1.0, workers: int | None = None) -> RoundtripReport:
    """Compare ``E f(X_T)`` from Euler on (b, sigma) with ``E f(Lambda^{-1}(Y_T))`` from Euler on ``b_*``.

    The two routes use independent seeds (``seed``, ``seed + 1``); the pass
    band is three combined standard errors plus ``budget_const * dt``.
    """
    grid = TimeGrid(0.0, float(T), int(n_steps))
    bstar = transform_drift(lmap, b, sigma)
    xd, xt = _route_samples(b, sigma, lmap, bstar, x0, grid, seed, n_paths, workers)
    out = []
    for name in fs:
        f = _TEST_FUNCTIONS[name]
        out.append(RouteComparison(name, mc.mean_se(f(xd)), mc.mean_se(f(xt)), budget_const * grid.dt))
    return RoundtripReport(out)


@dataclass
class DensityRouteReport:
    x: np.ndarray
    malliavin: np.ndarray
    kde: np.ndarray
    bulk: tuple

    @property
    def rel_sup_gap(self) -> float:
        return float(np.max(np.abs(self.malliavin - self.kde)) / np.max(self.kde))

    @property
    def passed(self) -> bool:
        return self.rel_sup_gap <= 0.05


def density_route_check(b: DriftSpec, sigma: SigmaSpec, lmap: LampertiMap, x0: float = 0.0, T: float = 1.0,
                        n_paths: int = 100_000, n_steps: int = 256, n_points: int = 25, seed: int = 0,
                        workers: int | None = None) -> DensityRouteReport:
    """``p_X(x) = p_Y(Lambda(x)) |Lambda'(x)|`` with ``p_Y`` from Malliavin weights, against a KDE of direct Euler.

    The bulk interval runs between the 5% and 95% quantiles of the direct
    samples; the gap is reported relative to the KDE maximum there.
    """
    grid = TimeGrid(0.0, float(T), int(n_steps))
    bstar = transform_drift(lmap, b, sigma)
    xd = mc.map_paths(lambda s, c: _euler_multiplicative(b, sigma, x0, sample_increments(seed, grid, 1, s, c), grid),
                      n_paths, workers=workers)
    lo, hi = np.quantile(xd, [0.05, 0.95])
    x = np.linspace(lo, hi, n_points)
    y = lmap.forward(x[:, None])[:, 0]
    y0 = float(lmap.forward(np.array([[x0]]))[0, 0])
    est = estimate_density(bstar, y0, T, y, order=0, n_paths=n_paths, seed=seed + 1, n_steps=n_steps, workers=workers)
    pX = est.values / sigma(x)
    kde = kde_baseline(xd, x).values
    return DensityRouteReport(x, pX, kde, (float(lo), float(hi)))


def lamperti_drift(b_name: str, b_params: dict | None = None) -> DriftSpec:
    return builtin_drift(b_name, b_params)
