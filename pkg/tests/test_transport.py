import math

import numpy as np
import pytest

from malflow.drift import builtin_drift
from malflow.errors import DomainError, InvalidArgument
from malflow.paths import BrownianPath, SeedSpec, make_grid, sample_path
from malflow.sde import euler
from malflow.transport import (initial_datum, ito_refinement_study, ito_residual, solve_transport,
                               stratonovich_residual, test_function, weak_refinement_study, weak_residual)


def _path(n=128, seed=1, d=1):
    return sample_path(SeedSpec(seed), make_grid(0.0, 1.0, n), d)


@pytest.mark.parametrize("name,kw,d", [("gauss-bump", {"center": 0.3, "width": 0.7}, 2),
                                       ("cosine", {"omega": [1.0, -2.0]}, 2),
                                       ("poly-probe", {"degree": 2}, 1)])
def test_datum_derivatives_are_consistent(name, kw, d):
    u0 = initial_datum(name, d, **kw)
    x = np.array([0.2, -0.4])[:d]
    for h in (1e-3, 5e-4):
        E = np.eye(d) * h
        fd = np.array([(u0.u(x + e) - u0.u(x - e)) / (2 * h) for e in E])
        assert np.allclose(fd, u0.grad(x), atol=2 * h * h * max(u0.hess_sup, 1) * 10)
        fdh = np.array([(u0.grad(x + e) - u0.grad(x - e)) / (2 * h) for e in E])
        assert np.allclose(fdh, u0.hess(x), atol=1e-4)


def test_initial_value_and_range():
    spec = builtin_drift("softplus", {"a": 0.5})
    u0 = initial_datum("cosine", 1, omega=2.0)
    sol = solve_transport(spec, u0, _path(), np.linspace(-2, 2, 11))
    assert np.array_equal(sol.values[0], u0.u(sol.x))
    assert np.max(np.abs(sol.values)) <= u0.sup


def test_zero_drift_is_translation():
    u0 = initial_datum("gauss-bump", 1)
    p = _path()
    x = np.linspace(-1, 1, 5)
    sol = solve_transport(builtin_drift("zero"), u0, p, x)
    ref = u0.u(x[None, :, None] - p.values[:, None, :])
    assert np.max(np.abs(sol.values - ref)) <= 1e-12


def test_ou_matches_closed_form_inverse_flow():
    theta = 1.0
    u0 = initial_datum("gauss-bump", 1)
    x = np.linspace(-1, 1, 5)
    gaps = []
    for n in (128, 512):
        p = _path(n, seed=5)
        sol = solve_transport(builtin_drift("ou", {"theta": theta}), u0, p, x, t_nodes=[n], laplacian=None)
        t = p.grid.nodes
        # stochastic convolution I_T = int_0^T exp(-theta (T - s)) dB_s on the same increments
        I = np.sum(np.exp(-theta * (1.0 - t[:-1])) * p.increments[:, 0])
        ref = u0.u((math.exp(theta) * (x - I))[:, None])
        gaps.append(np.max(np.abs(sol.values[0] - ref)))
    assert gaps[1] < gaps[0]
    assert gaps[1] < 10 * (1.0 / 512) * math.exp(theta) * 3


def test_pathwise_consistency():
    spec = builtin_drift("softplus", {"a": 1.0})
    u0 = initial_datum("gauss-bump", 1)
    p = _path(256)
    x0 = np.linspace(-2, 2, 9)
    xT = euler(spec, x0[:, None], np.broadcast_to(p.increments, (9, 256, 1)), p.grid, keep_path=False)
    sol = solve_transport(spec, u0, p, xT, t_nodes=[256], laplacian=None)
    bound = 10 * p.grid.dt * (1 + np.abs(x0)) * u0.grad_sup
    assert np.all(np.abs(sol.values[0] - u0.u(x0[:, None])) <= bound)


def test_gradient_matches_difference_of_u():
    spec = builtin_drift("softplus", {"a": 1.0})
    u0 = initial_datum("gauss-bump", 1)
    p = _path()
    x, h = np.array([0.3]), 1e-5
    g = solve_transport(spec, u0, p, x, laplacian=None).grad[:, 0, 0]
    up = solve_transport(spec, u0, p, x + h, laplacian=None).values[:, 0]
    um = solve_transport(spec, u0, p, x - h, laplacian=None).values[:, 0]
    assert np.allclose(g, (up - um) / (2 * h), atol=1e-8)


def test_chain_and_difference_laplacians_agree():
    spec = builtin_drift("softplus", {"a": 1.0, "d": 2})
    u0 = initial_datum("gauss-bump", 2, width=0.8)
    p = _path(64, d=2)
    x = np.array([[0.1, 0.2], [-0.5, 0.4]])
    a = solve_transport(spec, u0, p, x, laplacian="chain").laplacian
    b = solve_transport(spec, u0, p, x, laplacian="fd").laplacian
    assert np.allclose(a, b, atol=1e-7)


def test_linear_probe_residual_is_zero():
    sol = solve_transport(builtin_drift("zero"), initial_datum("poly-probe", 1, degree=1), _path(), [-1.0, 2.0])
    assert np.max(np.abs(ito_residual(sol, builtin_drift("zero")))) < 1e-13


def test_quadratic_probe_residuals():
    zero = builtin_drift("zero")
    p = _path(256, seed=7)
    sol = solve_transport(zero, initial_datum("poly-probe", 1, degree=2), p, [0.5, -1.0])
    R = ito_residual(sol, zero)
    qv = np.concatenate([[0.0], np.cumsum(p.increments[:, 0] ** 2 - p.grid.dt)])
    assert np.allclose(R, qv[:, None], atol=1e-10)
    # one-path fluctuation of sum(dB^2 - dt) has standard deviation dt sqrt(2 n)
    assert abs(R[-1, 0]) <= 3 * p.grid.dt * math.sqrt(2 * 256)
    # the midpoint (Stratonovich) form has no quadratic-variation remainder
    assert np.max(np.abs(stratonovich_residual(sol, zero))) < 1e-12


def test_ito_residual_decreases_under_refinement():
    study = ito_refinement_study(builtin_drift("ou"), initial_datum("gauss-bump", 1), np.linspace(-1, 1, 3), 12,
                                 n_paths=32, base_steps=64, levels=4)
    assert np.all(study.rates > 0)
    assert study.per_path.shape == (32, 4)
    assert study.fitted_rate == pytest.approx(-np.polyfit(range(4), np.log2(study.sup_residuals), 1)[0])


def test_adaptedness():
    spec = builtin_drift("softplus")
    u0 = initial_datum("gauss-bump", 1)
    p = _path(64)
    inc = p.increments.copy()
    inc[40:] += 1.0
    q = BrownianPath(p.grid, inc)
    a = solve_transport(spec, u0, p, [0.0, 1.0]).values
    b = solve_transport(spec, u0, q, [0.0, 1.0]).values
    assert np.array_equal(a[:41], b[:41])
    assert not np.array_equal(a[41:], b[41:])


def test_t_nodes_subset_matches_full():
    spec = builtin_drift("softplus")
    u0 = initial_datum("cosine", 1)
    p = _path(32)
    full = solve_transport(spec, u0, p, [0.1, 0.9])
    part = solve_transport(spec, u0, p, [0.1, 0.9], t_nodes=[3, 17, 32])
    assert np.array_equal(part.values, full.values[[3, 17, 32]])
    with pytest.raises(InvalidArgument):
        solve_transport(spec, u0, p, [0.0], t_nodes=[33])
    with pytest.raises(InvalidArgument):
        ito_residual(part, spec)


def test_weak_residual_zero_theta_and_zero_drift():
    u0 = initial_datum("gauss-bump", 1)
    p = _path(64)
    x = np.linspace(-4, 4, 401)
    sol = solve_transport(builtin_drift("ou"), u0, p, x, laplacian=None)
    assert np.all(weak_residual(sol, builtin_drift("ou"), test_function("zero")) == 0.0)
    for n in (64, 256):
        q = _path(n)
        z = solve_transport(builtin_drift("zero"), u0, q, x, laplacian=None)
        assert np.max(np.abs(weak_residual(z, builtin_drift("zero"), test_function("gauss", 0.0, 0.4)))) <= q.grid.dt


def test_weak_residual_box_too_small():
    p = _path(16)
    sol = solve_transport(builtin_drift("ou"), initial_datum("gauss-bump", 1), p, np.linspace(-0.5, 0.5, 21),
                          laplacian=None)
    with pytest.raises(DomainError):
        weak_residual(sol, builtin_drift("ou"), test_function("bump", 0.0, 1.0))


def test_weak_residual_refinement():
    st_ = weak_refinement_study(builtin_drift("ou"), initial_datum("gauss-bump", 1), test_function("gauss", 0.0, 0.5),
                                (-5, 5), 3, base_steps=32, base_nx=101, levels=4)
    assert st_.sup_residuals[-1] < st_.sup_residuals[0]


def test_test_function_factory_rejects_unknown():
    with pytest.raises(InvalidArgument):
        test_function("triangle")
    with pytest.raises(InvalidArgument):
        initial_datum("poly-probe", 1, degree=3)
