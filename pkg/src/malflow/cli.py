"""Command-line front end: ``malflow <subcommand> [options]``.

Every run validates its configuration first (exit 2 on error, nothing
written), then computes, writes CSV or JSON output and a run manifest
``<out>.manifest.json``. Exit code 1 signals a failed check.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, criteria, mc
from .density import estimate_density, kde_baseline, oracle_density, require_density_order, terminal_samples
from .drift import DerivativeWord, builtin_drift
from .errors import CapabilityError, ConfigError, MalflowError
from .flow import check_flow_properties, jacobian_fd_check, picard_series, variational_flow
from .lamperti import build_map_1d, builtin_sigma, density_route_check, roundtrip_check
from .malliavin import covariance, malliavin_first
from .paths import SeedSpec, TimeGrid, sample_path
from .sde import simulate, solve_forward
from .shuffles import Poly, check_moment_bound, verify_shuffle2_identity, verify_shuffle_identity
from .transport import (initial_datum, ito_refinement_study, ito_residual, solve_transport, test_function,
                        weak_residual)

SCHEMA = 1
HEADER = f"# malliavin-flow v{__version__} schema={SCHEMA}"
SUBCOMMANDS = ("simulate", "flow", "malliavin", "density", "verify-shuffle", "verify-estimate", "transport",
               "lamperti", "suite")
REPRO_NOTE = ("per-path counter-based RNG streams and exactly rounded reductions: reruns agree to <= 1e-12 "
              "relative for any worker count")

# module-specific defaults; keys double as the accepted option names
OPTION_DEFAULTS = {
    "simulate": {"x0": 0.0},
    "flow": {"x0": 0.0, "s": 0.0, "picard": 10, "path_index": 0},
    "malliavin": {"x0": 0.0, "t": None, "path_index": 0},
    "density": {"x0": 0.0, "t": None, "y": "-3:3:13", "order": 0, "method": "malliavin"},
    "verify-shuffle": {"m": 2, "n": 2, "k": None, "n_sub": 4000, "s": 0.0, "t": 1.0},
    "verify-estimate": {"m_max": 6, "bump_center": 0.5, "bump_radius": 1.0, "alpha": 1, "n_sub": 256},
    "transport": {"u0": "gauss-bump", "u0_params": {}, "x": "-2:2:9", "t_nodes": "all", "residual": "both",
                  "refine": 0, "path_index": 0, "theta": "bump", "theta_center": 0.0, "theta_width": 1.0},
    "lamperti": {"sigma": "sin2", "sigma0": 1.0, "b": "zero", "b_params": {}, "check": "roundtrip", "x0": 0.0,
                 "anchor": 0.0},
    "suite": {"name": "smoke"},
}
GRID_DEFAULTS = {"t0": 0.0, "T": 1.0, "steps": 256}
MC_DEFAULTS = {"paths": 10_000, "seed": 0}


@dataclass
class ExperimentConfig:
    subcommand: str
    drift: dict = field(default_factory=lambda: {"name": "zero", "params": {}})
    grid: dict = field(default_factory=lambda: dict(GRID_DEFAULTS))
    mc: dict = field(default_factory=lambda: dict(MC_DEFAULTS))
    options: dict = field(default_factory=dict)
    output: dict = field(default_factory=lambda: {"path": None, "format": "csv"})

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "drift": copy.deepcopy(self.drift), "grid": dict(self.grid),
                "mc": dict(self.mc), "options": copy.deepcopy(self.options), "output": dict(self.output)}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - {"subcommand", "drift", "grid", "mc", "options", "output"}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration block")
        sub = data.get("subcommand")
        if sub not in SUBCOMMANDS:
            raise ConfigError(f"subcommand: expected one of {', '.join(SUBCOMMANDS)}, got {sub!r}")
        cfg = cls(sub)
        for blk in ("drift", "grid", "mc", "output"):
            if blk in data:
                if not isinstance(data[blk], dict):
                    raise ConfigError(f"{blk}: expected a table")
                getattr(cfg, blk).update(copy.deepcopy(data[blk]))
        cfg.options = dict(OPTION_DEFAULTS[sub])
        opts = data.get("options", {})
        for k, v in opts.items():
            if k not in cfg.options:
                raise ConfigError(f"options.{k}: not an option of '{sub}'")
            cfg.options[k] = copy.deepcopy(v)
        return cfg


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from exc


def parse_range(spec: str, field_name: str) -> np.ndarray:
    """``"a:b:n"`` -> n evenly spaced points; a comma list is taken literally."""
    try:
        if ":" in str(spec):
            a, b, n = str(spec).split(":")
            n = int(n)
            if n < 1:
                raise ValueError
            return np.linspace(float(a), float(b), n)
        return np.array([float(v) for v in str(spec).split(",")])
    except ValueError:
        raise ConfigError(f"{field_name}: expected 'a:b:n' or a comma list, got {spec!r}") from None


def _num(cfg_block: dict, key: str, path: str, kind=float, lo=None, strict=False):
    v = cfg_block.get(key)
    try:
        v = kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {cfg_block.get(key)!r}") from None
    if kind is float and not math.isfinite(v):
        raise ConfigError(f"{path}: must be finite")
    if lo is not None and (v <= lo if strict else v < lo):
        raise ConfigError(f"{path}: must be {'>' if strict else '>='} {lo}")
    return v


@dataclass
class Prepared:
    """Validated, constructed inputs for one run."""
    cfg: ExperimentConfig
    spec: object = None
    grid: TimeGrid | None = None
    paths: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)


def validate(cfg: ExperimentConfig) -> Prepared:
    """Check every field against the module preconditions; raises ConfigError/CapabilityError."""
    o = cfg.options
    prep = Prepared(cfg)
    fmt = cfg.output.get("format", "csv")
    if fmt not in ("csv", "json"):
        raise ConfigError(f"output.format: expected csv or json, got {fmt!r}")
    if cfg.subcommand == "suite":
        if o["name"] not in ("smoke", "full"):
            raise ConfigError(f"options.name: unknown suite {o['name']!r} (expected smoke or full)")
        return prep
    t0 = _num(cfg.grid, "t0", "grid.t0")
    T = _num(cfg.grid, "T", "grid.T")
    steps = _num(cfg.grid, "steps", "grid.steps", int, 1)
    if T <= t0:
        raise ConfigError("grid.T: must exceed grid.t0")
    prep.grid = TimeGrid(t0, T, steps)
    prep.paths = _num(cfg.mc, "paths", "mc.paths", int, 1)
    prep.seed = _num(cfg.mc, "seed", "mc.seed", int, 0)
    if cfg.subcommand not in ("verify-shuffle", "verify-estimate", "lamperti"):
        name = cfg.drift.get("name")
        params = cfg.drift.get("params", {}) or {}
        if not isinstance(params, dict):
            raise ConfigError("drift.params: expected a table")
        try:
            prep.spec = builtin_drift(name, params)
        except (MalflowError, TypeError, ValueError) as exc:
            raise ConfigError(f"drift: {exc}") from None
    sub = cfg.subcommand
    if sub in ("simulate", "flow", "malliavin", "density"):
        x0 = np.atleast_1d(np.asarray(o["x0"], dtype=float))
        if x0.size not in (1, prep.spec.d) or not np.all(np.isfinite(x0)):
            raise ConfigError(f"options.x0: expected {prep.spec.d} finite value(s)")
        prep.extra["x0"] = np.broadcast_to(x0, (prep.spec.d,)).copy()
    if sub in ("malliavin", "density"):
        t = prep.grid.T if o["t"] is None else _num(o, "t", "options.t")
        try:
            prep.extra["t_index"] = prep.grid.index_of(t)
        except MalflowError:
            raise ConfigError(f"options.t: {t} is not a node of the grid") from None
        prep.extra["t"] = t
    if sub == "flow":
        try:
            prep.extra["s_index"] = prep.grid.index_of(_num(o, "s", "options.s"))
        except MalflowError:
            raise ConfigError("options.s: not a node of the grid") from None
        _num(o, "picard", "options.picard", int, 0)
    if sub == "density":
        if o["method"] not in ("malliavin", "kde", "both"):
            raise ConfigError("options.method: expected malliavin, kde or both")
        order = _num(o, "order", "options.order", int, 0)
        prep.extra["y"] = parse_range(o["y"], "options.y")
        if o["method"] != "kde":
            require_density_order(prep.spec, order)
        elif order != 0:
            raise ConfigError("options.order: the KDE baseline estimates the density only (order 0)")
    if sub == "verify-shuffle":
        m = _num(o, "m", "options.m", int, 0)
        n = _num(o, "n", "options.n", int, 0)
        if m + n > 6:
            raise ConfigError("options.m: m + n must be <= 6")
        if o["k"] is not None and not 0 <= int(o["k"]) <= m:
            raise ConfigError("options.k: must satisfy 0 <= k <= m")
        _num(o, "n_sub", "options.n_sub", int, 1)
    if sub == "verify-estimate":
        mm = _num(o, "m_max", "options.m_max", int, 1)
        if mm > 8:
            raise ConfigError("options.m_max: must be <= 8")
        if int(o["alpha"]) not in (0, 1):
            raise ConfigError("options.alpha: expected 0 or 1")
        _num(o, "bump_radius", "options.bump_radius", float, 0, strict=True)
    if sub == "transport":
        try:
            prep.extra["u0"] = initial_datum(o["u0"], prep.spec.d, **(o["u0_params"] or {}))
        except (MalflowError, TypeError) as exc:
            raise ConfigError(f"options.u0: {exc}") from None
        prep.extra["x"] = parse_range(o["x"], "options.x")
        if o["residual"] not in ("ito", "weak", "both", "none"):
            raise ConfigError("options.residual: expected ito, weak, both or none")
        if o["residual"] in ("ito", "both") and prep.spec.k < 2:
            raise CapabilityError(f"the Ito residual needs the Laplacian, i.e. drift smoothness k >= 2; "
                                  f"drift '{prep.spec.name}' has k={prep.spec.k}")
        if o["residual"] in ("weak", "both") and prep.spec.d != 1:
            raise ConfigError("options.residual: the weak residual is implemented for d = 1")
        _num(o, "refine", "options.refine", int, 0)
        if str(o["t_nodes"]) == "all":
            prep.extra["t_idx"] = np.arange(steps + 1)
        else:
            ts = parse_range(o["t_nodes"], "options.t_nodes")
            try:
                prep.extra["t_idx"] = np.array([prep.grid.index_of(t) for t in ts])
            except MalflowError:
                raise ConfigError("options.t_nodes: every time must be a grid node") from None
        if o["residual"] in ("weak", "both"):
            try:
                prep.extra["theta"] = test_function(o["theta"], float(o["theta_center"]), float(o["theta_width"]))
            except MalflowError as exc:
                raise ConfigError(f"options.theta: {exc}") from None
    if sub == "lamperti":
        if o["check"] not in ("roundtrip", "density"):
            raise ConfigError("options.check: expected roundtrip or density")
        try:
            prep.extra["sigma"] = builtin_sigma(o["sigma"], {"sigma0": o["sigma0"]})
            prep.extra["b"] = builtin_drift(o["b"], o["b_params"] or {})
        except MalflowError as exc:
            raise ConfigError(f"options: {exc}") from None
        if prep.extra["b"].d != 1:
            raise ConfigError("options.b: the Lamperti map is built for d = 1")
    return prep


# output ----------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def render(blocks: list, fmt: str) -> str:
    """Blocks are ``(tag, columns, rows)``; CSV blocks are separated by ``# block=<tag>`` lines."""
    if fmt == "json":
        doc = {"tool": "malliavin-flow", "version": __version__, "schema": SCHEMA,
               "blocks": [{"tag": t, "columns": list(c), "rows": criteria._clean(r)} for t, c, r in blocks]}
        return json.dumps(doc, indent=1) + "\n"
    buf = io.StringIO()
    buf.write(HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for tag, cols, rows in blocks:
        buf.write(f"# block={tag}\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# runners ---------------------------------------------------------------------

def _check(passed, **values):
    return {"passed": bool(passed), "values": criteria._clean(values)}


def run_simulate(p: Prepared, workers):
    X = simulate(p.spec, p.extra["x0"], p.grid, p.paths, p.seed)
    xT = X[:, -1, :]
    cols = ["path"] + [f"x{i + 1}" for i in range(p.spec.d)]
    rows = [[i] + list(r) for i, r in enumerate(xT)]
    est = [mc.mean_se(xT[:, i]) for i in range(p.spec.d)]
    checks = {"finite": _check(np.all(np.isfinite(X)), mean=[e.mean for e in est], se=[e.se for e in est])}
    return [("terminal", cols, rows)], checks


def run_flow(p: Prepared, workers):
    o = p.cfg.options
    path = sample_path(SeedSpec(p.seed, int(o["path_index"])), p.grid, p.spec.d)
    sol = solve_forward(p.spec, p.extra["x0"], path)
    s = p.extra["s_index"]
    jet = variational_flow(p.spec, sol, s, hessian=False)
    d = p.spec.d
    cols = ["t"] + [f"J{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    rows = [[p.grid.nodes[s + r]] + list(jet.jacobian[r].ravel()) for r in range(len(jet.jacobian))]
    M = int(o["picard"])
    pt = picard_series(p.spec, sol, s, M)
    prow = [[m, pt.term_norms[m]] + list(pt.partial_sums[m].ravel()) for m in range(M + 1)]
    pcols = ["m", "term_norm"] + [f"S{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    fd = jacobian_fd_check(p.spec, p.extra["x0"], path, np.eye(d)[0])
    n = p.grid.n_steps
    props = check_flow_properties(p.spec, p.extra["x0"], path, 0, n // 2, n)
    checks = {"jacobian_fd": _check(fd.rel_error <= 1e-3, rel_error=fd.rel_error),
              "flow_property": _check(props.passed, composition=props.composition_defect,
                                      identity=props.identity_defect)}
    return [("jacobian", cols, rows), ("picard", pcols, prow)], checks


def run_malliavin(p: Prepared, workers):
    o = p.cfg.options
    path = sample_path(SeedSpec(p.seed, int(o["path_index"])), p.grid, p.spec.d)
    sol = solve_forward(p.spec, p.extra["x0"], path)
    ti = p.extra["t_index"]
    jet = malliavin_first(p.spec, sol, ti)
    d = p.spec.d
    cols = ["s"] + [f"D{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    rows = [[p.grid.nodes[s]] + list(jet.at(s, ti).ravel()) for s in range(ti + 1)]
    cov = covariance(p.spec, sol, ti, jet)
    crow = [list(cov.gamma.ravel()) + [cov.det]]
    ccols = [f"g{i + 1}{j + 1}" for i in range(d) for j in range(d)] + ["det"]
    checks = {"nondegenerate": _check(cov.det > 0, det=cov.det)}
    return [("derivative", cols, rows), ("covariance", ccols, crow)], checks


def run_density(p: Prepared, workers):
    o = p.cfg.options
    y, t, order = p.extra["y"], p.extra["t"], int(o["order"])
    x0 = float(p.extra["x0"][0])
    blocks, checks = [], {}
    steps = int(round((t - p.grid.t0) / p.grid.dt))
    est = None
    if o["method"] in ("malliavin", "both"):
        est = estimate_density(p.spec, x0, t - p.grid.t0, y, order, p.paths, p.seed, steps, workers)
        blocks.append(("malliavin", ["y", "value", "se"], [[a, b, c] for a, b, c in zip(y, est.values,
                                                                                      est.std_errors)]))
    if o["method"] in ("kde", "both"):
        xs = terminal_samples(p.spec, x0, t - p.grid.t0, p.paths, p.seed + 1, steps, workers)
        k = kde_baseline(xs, y)
        blocks.append(("kde", ["y", "value", "bandwidth"], [[a, b, k.extra["bandwidth"]] for a, b in zip(y, k.values)]))
    if p.spec.name in ("zero", "const", "ou"):
        orc = oracle_density(p.spec.name, p.spec.params, x0, t - p.grid.t0, y, order)
        blocks.append(("oracle", ["y", "value"], [[a, b] for a, b in zip(y, orc.values)]))
        if est is not None:
            # SE is exactly 0 where no path lands beyond y; the z-test says nothing there
            live = est.std_errors > 0
            z = np.abs(est.values - orc.values)[live] / est.std_errors[live]
            checks["oracle_3se"] = _check(np.all(z <= 3), max_z=float(np.max(z, initial=0.0)),
                                          empty_tail_points=int(np.sum(~live)))
    return blocks, checks


def _shuffle_factors(count, offset=0):
    base = [Poly([1, 2]), Poly([0, 1, 1]), Poly([3, -1]), Poly([1, 0, -2]), Poly([2]), Poly([-1, 1, 0, 1])]
    return [base[(offset + i) % len(base)] for i in range(count)]


def run_verify_shuffle(p: Prepared, workers):
    o = p.cfg.options
    m, n = int(o["m"]), int(o["n"])
    s, t, n_sub = float(o["s"]), float(o["t"]), int(o["n_sub"])
    ks = [None] + list(range(m + 1)) if o["k"] is None else [int(o["k"])]
    rows, worst = [], 0.0
    for k in ks:
        if k is None:
            r = verify_shuffle_identity(_shuffle_factors(m), _shuffle_factors(n, 3), m, n, s, t, n_sub)
        else:
            r = verify_shuffle2_identity(_shuffle_factors(m + n, 1), k, m, n, s, t, n_sub)
        orc = r.oracle_residual if r.oracle_residual is not None else math.nan
        worst = max(worst, orc)
        rows.append([m, n, "" if k is None else k, r.n_terms, r.lhs, r.rhs, r.residual, orc])
    cols = ["m", "n", "k", "terms", "lhs", "rhs", "residual", "oracle_residual"]
    return [("shuffle", cols, rows)], {"oracle_1e-8": _check(worst <= 1e-8, worst_oracle_residual=worst)}


def run_verify_estimate(p: Prepared, workers):
    o = p.cfg.options
    b = builtin_drift("bump", {"center": float(o["bump_center"]), "radius": float(o["bump_radius"])})
    rows, roots = [], []
    t0, T = p.grid.t0, p.grid.T
    for m in range(1, int(o["m_max"]) + 1):
        st = check_moment_bound(DerivativeWord(((int(o["alpha"]),),) * m, (b,) * m), t0, T, p.paths,
                                int(o["n_sub"]), p.seed + m, workers)
        rows.append([m, st.signed_mean, st.se, st.rhs_core, st.ratio_root, st.ratio_root_se])
        roots.append(st.ratio_root)
    band = max(roots) / min(roots) if min(roots) > 0 else math.inf
    cols = ["m", "mean", "se", "rhs_core", "ratio_root", "ratio_root_se"]
    return [("moment_bound", cols, rows)], {"band_factor_2": _check(band <= 2, band=band)}


def run_transport(p: Prepared, workers):
    o = p.cfg.options
    u0, x = p.extra["u0"], p.extra["x"]
    path = sample_path(SeedSpec(p.seed, int(o["path_index"])), p.grid, p.spec.d)
    want_ito = o["residual"] in ("ito", "both")
    want_weak = o["residual"] in ("weak", "both")
    sol = solve_transport(p.spec, u0, path, x, laplacian="fd" if want_ito else None)
    R = ito_residual(sol, p.spec) if want_ito else None
    d = p.spec.d
    cols = ["t", "x"] + [f"grad{i + 1}" for i in range(d)] + ["laplacian", "residual"]
    cols.insert(2, "u")
    rows = []
    for j in p.extra["t_idx"]:
        for k in range(len(sol.x)):
            lap = sol.laplacian[j, k] if sol.laplacian is not None else math.nan
            res = R[j, k] if R is not None else math.nan
            rows.append([sol.t[j], sol.x[k, 0], sol.values[j, k]] + list(sol.grad[j, k]) + [lap, res])
    blocks = [("solution", cols, rows)]
    checks = {"initial_value": _check(np.array_equal(sol.values[0], u0.u(sol.x)))}
    if u0.bounded:
        checks["range"] = _check(np.max(np.abs(sol.values)) <= u0.sup, max_abs=float(np.max(np.abs(sol.values))))
    if want_ito:
        checks["ito_sup"] = _check(True, sup=float(np.max(np.abs(R))))
    if want_weak:
        W = weak_residual(sol, p.spec, p.extra["theta"])
        blocks.append(("weak", ["t", "weak_residual"], [[sol.t[j], W[j]] for j in p.extra["t_idx"]]))
        checks["weak_sup"] = _check(True, sup=float(np.max(np.abs(W))))
    L = int(o["refine"])
    if L >= 1 and want_ito:
        st = ito_refinement_study(p.spec, u0, x, p.seed, max(1, min(p.paths, 8)), p.grid.n_steps, L + 1,
                                  p.grid.T - p.grid.t0)
        blocks.append(("refinement", ["level", "steps", "sup_residual"],
                       [[l, s, v] for l, (s, v) in enumerate(zip(st.steps, st.sup_residuals))]))
        checks["ito_rate_0.4"] = _check(st.fitted_rate >= 0.4, rate=st.fitted_rate)
    return blocks, checks


def run_lamperti(p: Prepared, workers):
    o = p.cfg.options
    sigma, b = p.extra["sigma"], p.extra["b"]
    lmap = build_map_1d(sigma, float(o["anchor"]))
    x0, T = float(o["x0"]), p.grid.T - p.grid.t0
    if o["check"] == "roundtrip":
        rep = roundtrip_check(b, sigma, lmap, x0, T, p.paths, p.grid.n_steps, p.seed, workers=workers)
        rows = [[c.f, c.direct.mean, c.direct.se, c.transformed.mean, c.transformed.se, c.diff, c.dt_budget,
                 c.passed] for c in rep.comparisons]
        cols = ["f", "direct", "direct_se", "transformed", "transformed_se", "diff", "dt_budget", "passed"]
        return [("roundtrip", cols, rows)], {"roundtrip": _check(rep.passed, diffs=[c.diff for c in rep.comparisons])}
    rep = density_route_check(b, sigma, lmap, x0, T, p.paths, p.grid.n_steps, seed=p.seed, workers=workers)
    rows = [[a, m, k] for a, m, k in zip(rep.x, rep.malliavin, rep.kde)]
    return [("density", ["x", "malliavin_cov", "kde"], rows)], {
        "density_5pct": _check(rep.passed, rel_sup_gap=rep.rel_sup_gap)}


RUNNERS = {"simulate": run_simulate, "flow": run_flow, "malliavin": run_malliavin, "density": run_density,
           "verify-shuffle": run_verify_shuffle, "verify-estimate": run_verify_estimate,
           "transport": run_transport, "lamperti": run_lamperti}


def run(cfg: ExperimentConfig, workers=None, compare_to: dict | None = None, log=None) -> tuple[dict, int]:
    """Validate, compute, write outputs and manifest; returns ``(manifest, exit_code)``."""
    prep = validate(cfg)
    fmt = cfg.output.get("format", "csv")
    out = cfg.output.get("path") or (f"suite-{cfg.options['name']}.json" if cfg.subcommand == "suite"
                                     else f"{cfg.subcommand}.{fmt}")
    start = time.perf_counter()
    if cfg.subcommand == "suite":
        results = criteria.run_suite(cfg.options["name"], workers, progress=log)
        checks = {f"criterion_{r.id}": {"passed": r.passed, "values": r.values} for r in results}
        report = {"suite": cfg.options["name"], "version": __version__,
                  "criteria": [{k: v for k, v in r.to_dict().items()} for r in results]}
        text = None
    else:
        blocks, checks = RUNNERS[cfg.subcommand](prep, workers)
        text = render(blocks, fmt)
    if compare_to is not None:
        old = {k: v["values"] for k, v in compare_to.get("checks", {}).items() if k != "criterion_13"}
        new = {k: v["values"] for k, v in checks.items()}
        bad = criteria.compare_values(old, new)
        entry = {"passed": not bad, "values": {"compared": len(criteria.numeric_leaves(new)),
                                               "mismatches": len(bad)}, "mismatched": bad[:20]}
        checks["criterion_13" if cfg.subcommand == "suite" else "reproducible"] = entry
        if cfg.subcommand == "suite":
            report["criteria"].append({"id": 13, "name": criteria.NAMES[13], "passed": entry["passed"],
                                       "values": entry["values"], "seconds": 0.0})
    wall = time.perf_counter() - start
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    if text is None:
        text = json.dumps(report, indent=1) + "\n"
    Path(out).write_text(text)
    manifest = {"tool": "malliavin-flow", "version": __version__, "schema": SCHEMA, "config": cfg.to_dict(),
                "master_seed": cfg.mc.get("seed"), "workers": mc.worker_count(workers), "wall_time_s": wall,
                "outputs": [str(out)], "reproducibility": REPRO_NOTE,
                "checks": checks, "passed": all(c["passed"] for c in checks.values())}
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest, 0 if manifest["passed"] else 1


# argument parsing --------------------------------------------------------------

def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="malflow", description="Additive-noise SDE flows, Malliavin weights, "
                                                             "shuffle identities and stochastic transport.")
    ap.add_argument("--version", action="version", version=f"malflow {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    def common(p, drift=True, grid=True):
        g = p.add_argument_group("run")
        g.add_argument("--config", help="TOML or JSON experiment file")
        g.add_argument("--from-manifest", dest="from_manifest", help="rerun the configuration in a manifest")
        g.add_argument("--compare", action="store_true", help="with --from-manifest: compare every reported number")
        g.add_argument("--out", help="output file (manifest goes to <out>.manifest.json)")
        g.add_argument("--format", choices=("csv", "json"))
        g.add_argument("--workers", type=int, help="worker threads (default: MALFLOW_THREADS or 1)")
        if drift:
            g.add_argument("--drift", help="zero, const, ou, relu, softplus, bump")
            g.add_argument("--drift-param", dest="drift_param", action="append", type=_kv, default=[],
                           metavar="KEY=VALUE")
        if grid:
            g.add_argument("--t0", type=float)
            g.add_argument("--T", type=float)
            g.add_argument("--steps", type=int)
            g.add_argument("--paths", type=int)
            g.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="Euler paths, terminal states")
    common(p)
    p.add_argument("--x0", type=float, nargs="+")

    p = sub.add_parser("flow", help="Jacobian of the flow and Picard partial sums")
    common(p)
    p.add_argument("--x0", type=float, nargs="+")
    p.add_argument("--s", type=float)
    p.add_argument("--picard", type=int)
    p.add_argument("--path-index", dest="path_index", type=int)

    p = sub.add_parser("malliavin", help="Malliavin derivative and covariance along one path")
    common(p)
    p.add_argument("--x0", type=float, nargs="+")
    p.add_argument("--t", type=float)
    p.add_argument("--path-index", dest="path_index", type=int)

    p = sub.add_parser("density", help="density (or derivative) estimate")
    common(p)
    p.add_argument("--x0", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--y", help="'a:b:n' or comma list")
    p.add_argument("--order", type=int)
    p.add_argument("--method", choices=("malliavin", "kde", "both"))

    p = sub.add_parser("verify-shuffle", help="shuffle product identities against the exact oracle")
    common(p, drift=False)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n-sub", dest="n_sub", type=int)
    p.add_argument("--s", type=float)
    p.add_argument("--t", type=float)

    p = sub.add_parser("verify-estimate", help="Brownian moment bound for bump factors")
    common(p, drift=False)
    p.add_argument("--m-max", dest="m_max", type=int)
    p.add_argument("--bump-center", dest="bump_center", type=float)
    p.add_argument("--bump-radius", dest="bump_radius", type=float)
    p.add_argument("--alpha", type=int, choices=(0, 1))
    p.add_argument("--n-sub", dest="n_sub", type=int)

    p = sub.add_parser("transport", help="pathwise stochastic transport solution and residuals")
    common(p)
    p.add_argument("--u0", choices=("gauss-bump", "cosine", "poly-probe"))
    p.add_argument("--u0-param", dest="u0_param", action="append", type=_kv, default=[], metavar="KEY=VALUE")
    p.add_argument("--x", help="'a:b:n' evaluation points")
    p.add_argument("--t-nodes", dest="t_nodes", help="'all', 'a:b:n' or comma list of grid times")
    p.add_argument("--residual", choices=("ito", "weak", "both", "none"))
    p.add_argument("--refine", type=int, help="dt-halving levels for the Ito rate study")
    p.add_argument("--theta", choices=("bump", "gauss", "zero"))
    p.add_argument("--path-index", dest="path_index", type=int)

    p = sub.add_parser("lamperti", help="reduction to additive noise and two-route checks")
    common(p, drift=False)
    p.add_argument("--sigma", choices=("const", "sin2"))
    p.add_argument("--sigma0", type=float)
    p.add_argument("--b", help="drift family of the original equation")
    p.add_argument("--check", choices=("roundtrip", "density"))
    p.add_argument("--x0", type=float)
    p.add_argument("--anchor", type=float)

    p = sub.add_parser("suite", help="acceptance batteries (smoke or full)")
    common(p, drift=False, grid=False)
    p.add_argument("name", help="smoke or full")
    return ap


def config_from_args(args) -> tuple[ExperimentConfig, dict | None]:
    manifest = None
    base = {"subcommand": args.subcommand}
    if getattr(args, "from_manifest", None):
        try:
            manifest = json.loads(Path(args.from_manifest).read_text())
            base = copy.deepcopy(manifest["config"])
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"from-manifest: cannot use {args.from_manifest}: {exc}") from None
        if base.get("subcommand") != args.subcommand:
            raise ConfigError(f"from-manifest: manifest is for '{base.get('subcommand')}', not '{args.subcommand}'")
        base["output"] = {"path": None, "format": base.get("output", {}).get("format", "csv")}
    elif getattr(args, "config", None):
        base = load_config_file(args.config)
        base.setdefault("subcommand", args.subcommand)
        if base["subcommand"] != args.subcommand:
            raise ConfigError(f"subcommand: config file is for '{base['subcommand']}'")
    cfg = ExperimentConfig.from_dict(base)
    a = vars(args)
    if a.get("drift"):
        cfg.drift = {"name": a["drift"], "params": {}}
    for k, v in a.get("drift_param", []) or []:
        cfg.drift.setdefault("params", {})[k] = v
    for k in ("t0", "T", "steps"):
        if a.get(k) is not None:
            cfg.grid[k] = a[k]
    if a.get("paths") is not None:
        cfg.mc["paths"] = a["paths"]
    if a.get("seed") is not None:
        cfg.mc["seed"] = a["seed"]
    if a.get("out"):
        cfg.output["path"] = a["out"]
    if a.get("format"):
        cfg.output["format"] = a["format"]
    for key in cfg.options:
        if key in a and a[key] is not None:
            v = a[key]
            cfg.options[key] = v[0] if isinstance(v, list) and len(v) == 1 else v
    if a.get("u0_param"):
        cfg.options["u0_params"] = dict(cfg.options.get("u0_params") or {}, **dict(a["u0_param"]))
    return cfg, manifest


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, manifest = config_from_args(args)
        if args.compare and manifest is None:
            raise ConfigError("compare: needs --from-manifest")

        def log(r):
            print(r.line(), file=sys.stderr)

        man, code = run(cfg, args.workers, manifest if args.compare else None, log=log)
    except (ConfigError, CapabilityError) as exc:
        kind = "capability error" if isinstance(exc, CapabilityError) else "config error"
        print(f"malflow: {kind}: {exc}", file=sys.stderr)
        return 2
    except MalflowError as exc:
        print(f"malflow: error: {exc}", file=sys.stderr)
        return 2
    for name, c in man["checks"].items():
        print(f"{name}: {'PASS' if c['passed'] else 'FAIL'}")
    print(f"wrote {man['outputs'][0]} (+ manifest)")
    return code


if __name__ == "__main__":
    sys.exit(main())
