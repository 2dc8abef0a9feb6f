"""Acceptance batteries shared by the ``suite`` subcommand and the test-suite.

Each ``criterion_N`` returns a :class:`CriterionResult` whose ``values`` hold
only deterministic numbers (wall time is kept separately), so two runs can
be compared number by number.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .density import estimate_density, gaussian_density_derivative, oracle_moments
from .drift import DerivativeWord, builtin_drift
from .errors import CapabilityError
from .flow import jacobian_fd_check, picard_series
from .lamperti import build_map_1d, builtin_sigma, density_route_check, roundtrip_check
from .malliavin import malliavin_first, nondegeneracy_diagnostic
from .paths import SeedSpec, TimeGrid, make_grid, sample_path
from .sde import euler, girsanov_comparison, solve_forward, weight_moment_diagnostic
from .shuffles import (Poly, check_moment_bound, enumerate_shuffles, verify_shuffle2_identity,
                       verify_shuffle_identity)
from .transport import initial_datum, ito_refinement_study, solve_transport


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    values: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"criterion {self.id:2d} [{'PASS' if self.passed else 'FAIL'}] {self.name}"

    def to_dict(self) -> dict:
        return asdict(self)


def _clean(obj):
    """Plain JSON-friendly floats/lists/bools."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _timed(cid, name, fn, *args, **kw):
    t = time.perf_counter()
    passed, values = fn(*args, **kw)
    return CriterionResult(cid, name, bool(passed), _clean(values), time.perf_counter() - t)


def _c1(workers=None, n_paths=200_000, seed=101):
    y = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    est = estimate_density(builtin_drift("zero"), 0.0, 1.0, y, 0, n_paths, seed, n_steps=512, workers=workers)
    exact = np.exp(-0.5 * y * y) / math.sqrt(2 * math.pi)
    err = est.values - exact
    ok = bool(np.all(np.abs(err) <= 3 * est.std_errors) and np.all(np.abs(err) <= 0.01))
    return ok, {"y": y, "estimate": est.values, "se": est.std_errors, "exact": exact}


def _c2(workers=None, n_paths=200_000, seed=202):
    theta, x0, t = 1.0, 0.5, 1.0
    mean, var = oracle_moments("ou", {"theta": theta}, x0, t)
    y = mean + math.sqrt(var) * np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    spec = builtin_drift("ou", {"theta": theta})
    out, ok = {"y": y}, True
    for order in (0, 1):
        est = estimate_density(spec, x0, t, y, order, n_paths, seed + order, n_steps=512, workers=workers)
        exact = gaussian_density_derivative(y, mean, var, order)
        z = (est.values - exact) / est.std_errors
        ok &= bool(np.all(np.abs(z) <= 3))
        out[f"order{order}"] = {"estimate": est.values, "se": est.std_errors, "exact": exact}
    return ok, out


def _poly_factors(count, offset=0):
    base = [Poly([1, 2]), Poly([0, 1, 1]), Poly([3, -1]), Poly([1, 0, -2]), Poly([2]), Poly([-1, 1, 0, 1])]
    return [base[(offset + i) % len(base)] for i in range(count)]


def _c3(n_sub=4000):
    worst, count = 0.0, 0
    for total in range(2, 6):
        for m in range(1, total):
            n = total - m
            r = verify_shuffle_identity(_poly_factors(m), _poly_factors(n, 3), m, n, 0.0, 1.0, n_sub)
            worst = max(worst, r.oracle_residual)
            count += 1
            for k in range(0, m + 1):
                r2 = verify_shuffle2_identity(_poly_factors(m + n, 1), k, m, n, 0.0, 1.0, n_sub)
                worst = max(worst, r2.oracle_residual)
                count += 1
    return worst <= 1e-8, {"worst_oracle_residual": worst, "identities": count, "n_sub": n_sub}


def _c4():
    bad = [(m, n) for m in range(13) for n in range(13 - m)
           if len(enumerate_shuffles(m, n)) != math.comb(m + n, m)]
    return not bad, {"mismatches": len(bad), "max_total": 12}


def _c5(workers=None, n_paths=100_000, seed=505):
    b = builtin_drift("bump", {"center": 0.5})
    roots, ses, lhs = [], [], []
    for m in range(1, 7):
        st = check_moment_bound(DerivativeWord(((1,),) * m, (b,) * m), 0.0, 1.0, n_paths, 256, seed + m, workers)
        roots.append(st.ratio_root)
        ses.append(st.ratio_root_se)
        lhs.append(st.lhs)
    band = max(roots) / min(roots)
    return band <= 2.0, {"ratio_root": roots, "ratio_root_se": ses, "lhs": lhs, "band": band}


def _c6():
    spec = builtin_drift("softplus", {"a": 1.0, "c": 0.0})
    path = sample_path(SeedSpec(606, 0), make_grid(0.0, 1.0, 1024), 1)
    fd = jacobian_fd_check(spec, [0.3], path, [1.0], eps=1e-4)
    jet = malliavin_first(spec, solve_forward(spec, [0.3], path))
    mask = jet.D1_exp > 0
    rel_exp = float(np.max(np.abs(jet.D1_exp[mask] - jet.D1[..., 0, 0][mask]) / np.abs(jet.D1[..., 0, 0][mask])))
    dt = path.grid.dt
    return fd.rel_error <= 1e-3 and rel_exp <= 5 * dt, {"fd_rel_error": fd.rel_error, "exp_rel_error": rel_exp,
                                                         "dt": dt}


def _c7():
    theta = 1.0
    spec = builtin_drift("ou", {"theta": theta})
    path = sample_path(SeedSpec(707, 0), make_grid(0.0, 1.0, 1024), 1)
    sol = solve_forward(spec, [0.2], path)
    pt = picard_series(spec, sol, 0, 12)
    dt = path.grid.dt
    terms = pt.terms[:, 0, 0]
    exact = np.array([(-theta) ** m / math.factorial(m) for m in range(13)])
    budget = np.array([m * m * dt * abs(e) + 1e-15 for m, e in enumerate(exact)])
    term_ok = bool(np.all(np.abs(terms - exact) <= budget))
    ratios = pt.ratios()
    mono = bool(np.all(np.diff(ratios) < 0))
    below = bool(np.all(ratios[7:] < 0.5))
    return term_ok and mono and below, {"terms": terms, "exact": exact, "ratios": ratios}


def _c8(workers=None, n_paths=100_000, seed=808):
    grid = TimeGrid(0.0, 1.0, 256)
    bump = builtin_drift("bump", {"amp": 1.0})
    cmp = girsanov_comparison(bump, [0.0], lambda x: np.cos(x[..., 0]), grid, n_paths, seed, workers)
    c = 0.5
    const = builtin_drift("const", {"c": c})
    wm = girsanov_comparison(const, [0.0], lambda x: np.cos(x[..., 0]), grid, n_paths, seed + 2, workers).weight_mean
    eps = 0.5
    mom = weight_moment_diagnostic(const, [0.0], eps, n_paths, grid, seed + 4, workers).moment
    closed = math.exp(0.5 * eps * (1 + eps) * c * c)
    ok = cmp.z_score <= 3 and abs(wm.mean - 1) <= 3 * wm.se and abs(mom.mean - closed) <= 3 * mom.se
    return ok, {"direct": cmp.direct.mean, "reweighted": cmp.reweighted.mean, "z": cmp.z_score,
                "weight_mean": wm.mean, "weight_se": wm.se, "moment": mom.mean, "moment_se": mom.se,
                "moment_closed_form": closed}


def _c9(workers=None, n_paths=20_000, seed=909):
    theta, t, n_steps = 1.0, 1.0, 256
    ps = [1.0, 2.0, 4.0]
    ou = nondegeneracy_diagnostic(builtin_drift("ou", {"theta": theta}), [0.3], t, ps, 1000, n_steps, seed, workers)
    var = -math.expm1(-2 * theta * t) / (2 * theta)
    dt = t / n_steps
    rel = [abs(e.mean / var ** (-p) - 1) for e, p in zip(ou.estimates, ps)]
    ou_ok = all(r <= 5 * p * theta * dt for r, p in zip(rel, ps))
    relu = nondegeneracy_diagnostic(builtin_drift("relu"), [0.0], t, ps, n_paths, n_steps, seed + 1, workers)
    finite = all(math.isfinite(e.mean) for e in relu.estimates)
    ratio_ok = all(0.9 <= r <= 1.1 for r in relu.ratios)
    return ou_ok and finite and ratio_ok, {"ou_rel_error": rel, "relu_means": [e.mean for e in relu.estimates],
                                           "relu_ratios": relu.ratios}


def _c10(n_paths=64, seed=1010):
    grid = make_grid(0.0, 1.0, 256)
    spec = builtin_drift("ou", {"theta": 1.0})
    u0 = initial_datum("gauss-bump", 1, width=1.0)
    path = sample_path(SeedSpec(seed, 0), grid, 1)
    x0 = np.linspace(-2.0, 2.0, 9)
    xT = euler(spec, x0[:, None], np.broadcast_to(path.increments, (9,) + path.increments.shape), grid,
               keep_path=False)
    sol = solve_transport(spec, u0, path, xT, t_nodes=[grid.n_steps], laplacian=None)
    gap = np.abs(sol.values[0] - u0.u(x0[:, None]))
    bound = 10 * grid.dt * (1 + np.abs(x0)) * u0.grad_sup
    consistency = bool(np.all(gap <= bound))
    study = ito_refinement_study(spec, u0, np.linspace(-1.0, 1.0, 5), seed, n_paths, 64, 4)
    zero = builtin_drift("zero")
    xs = np.linspace(-2.0, 2.0, 7)
    s0 = solve_transport(zero, u0, path, xs, laplacian=None)
    transl = u0.u(xs[None, :, None] - path.values[:, None, :])
    exact_gap = float(np.max(np.abs(s0.values - transl)))
    ok = consistency and study.fitted_rate >= 0.4 and exact_gap <= 1e-12
    return ok, {"consistency_gap": gap, "consistency_bound": bound, "ito_sup": study.sup_residuals,
                "ito_rate": study.fitted_rate, "translation_gap": exact_gap}


def _c11(workers=None, n_paths=100_000, seed=1111):
    sigma = builtin_sigma("sin2")
    lmap = build_map_1d(sigma, 0.0)
    zero = builtin_drift("zero")
    rt = roundtrip_check(zero, sigma, lmap, 0.0, 1.0, n_paths, 256, seed, workers=workers)
    dens = density_route_check(zero, sigma, lmap, 0.0, 1.0, n_paths, 256, seed=seed + 2, workers=workers)
    return rt.passed and dens.passed, {
        "diffs": [c.diff for c in rt.comparisons], "combined_se": [c.combined_se for c in rt.comparisons],
        "dt_budget": rt.comparisons[0].dt_budget, "density_rel_sup_gap": dens.rel_sup_gap}


def _c12():
    try:
        estimate_density(builtin_drift("relu"), 0.0, 1.0, [0.0], order=1, n_paths=10)
    except CapabilityError as exc:
        msg = str(exc)
        return "k >= 2" in msg, {"message": msg}
    return False, {"message": "no error raised"}


NAMES = {
    1: "Gaussian density oracle (b = 0)",
    2: "OU density and derivative",
    3: "shuffle identities vs exact oracle",
    4: "shuffle counting",
    5: "moment bound ratio band",
    6: "variational flow vs finite differences",
    7: "Picard series for OU",
    8: "Girsanov consistency",
    9: "non-degeneracy diagnostic",
    10: "stochastic transport",
    11: "Lamperti two-route agreement",
    12: "density order capability threshold",
    13: "reproducibility from manifest",
}

_FNS = {1: _c1, 2: _c2, 3: _c3, 4: _c4, 5: _c5, 6: _c6, 7: _c7, 8: _c8, 9: _c9, 10: _c10, 11: _c11, 12: _c12}
_PARALLEL = {1, 2, 5, 8, 9, 11}
SMOKE = (3, 4, 6, 7, 10, 12)
FULL = tuple(range(1, 13))


def run_criterion(cid: int, workers: int | None = None) -> CriterionResult:
    fn = _FNS[cid]
    kw = {"workers": workers} if cid in _PARALLEL else {}
    return _timed(cid, NAMES[cid], fn, **kw)


def run_suite(name: str, workers: int | None = None, progress=None) -> list:
    if name not in ("smoke", "full"):
        raise ValueError(f"unknown suite '{name}' (expected smoke or full)")
    out = []
    for cid in (SMOKE if name == "smoke" else FULL):
        r = run_criterion(cid, workers)
        if progress:
            progress(r)
        out.append(r)
    return out


def numeric_leaves(obj, prefix=""):
    """Flatten nested values into ``{path: number}`` for exact comparison."""
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.update(numeric_leaves(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            out.update(numeric_leaves(v, f"{prefix}[{i}]"))
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        out[prefix] = float(obj)
    return out


def compare_values(a: dict, b: dict, rtol: float = 1e-12) -> list:
    """Paths whose numbers differ by more than ``rtol`` (relative; absolute near zero)."""
    la, lb = numeric_leaves(a), numeric_leaves(b)
    bad = sorted(set(la) ^ set(lb))
    for k in set(la) & set(lb):
        x, y = la[k], lb[k]
        if math.isnan(x) and math.isnan(y) or x == y:
            continue
        if abs(x - y) > rtol * max(abs(x), abs(y), 1e-300):
            bad.append(k)
    return bad
