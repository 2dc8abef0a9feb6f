import math

import numpy as np
import pytest

from malflow.drift import builtin_drift
from malflow.errors import InvalidArgument, NumericOverflow
from malflow.paths import SeedSpec, TimeGrid, make_grid, sample_path
from malflow.sde import (backward_states, euler, girsanov_comparison, girsanov_weight, simulate, solve_backward,
                         solve_forward, weight_moment_diagnostic)


def _path(n=128, d=1, seed=3):
    return sample_path(SeedSpec(seed), make_grid(0.0, 1.0, n), d)


def test_zero_drift_is_brownian_motion():
    p = _path()
    sol = solve_forward(builtin_drift("zero"), [0.4], p)
    assert np.allclose(sol.states[:, 0], 0.4 + p.values[:, 0], atol=1e-14)


def test_constant_drift_is_shifted_brownian_motion():
    p = _path()
    sol = solve_forward(builtin_drift("const", {"c": 2.0}), [0.0], p)
    assert np.allclose(sol.terminal, 2.0 + p.terminal, atol=1e-13)


def test_euler_residual_vanishes():
    p = _path(d=2)
    spec = builtin_drift("softplus", {"d": 2})
    sol = solve_forward(spec, [0.1, -0.2], p)
    assert np.max(np.abs(sol.euler_residual(spec))) < 1e-14


def test_ou_mean_and_variance():
    theta, x0 = 1.0, 1.5
    X = simulate(builtin_drift("ou", {"theta": theta}), [x0], make_grid(0.0, 1.0, 256), 20000, 5)[:, -1, 0]
    mean = x0 * math.exp(-theta)
    var = (1 - math.exp(-2 * theta)) / (2 * theta)
    assert abs(X.mean() - mean) < 3 * math.sqrt(var / len(X)) + 0.01
    assert abs(X.var() / var - 1) < 0.05


def test_vectorised_batch_equals_single():
    g = make_grid(0.0, 1.0, 32)
    spec = builtin_drift("softplus")
    X = simulate(spec, [0.0], g, 4, 9)
    for i in range(4):
        single = solve_forward(spec, [0.0], sample_path(SeedSpec(9, i), g))
        assert np.array_equal(X[i], single.states)


def test_backward_inverts_forward_up_to_dt():
    spec = builtin_drift("softplus", {"a": 1.0})
    for n in (64, 256):
        p = _path(n)
        sol = solve_forward(spec, [0.3], p)
        back = solve_backward(spec, sol.terminal, p, 1.0)
        assert abs(back[0] - 0.3) < 2 * p.grid.dt


def test_backward_states_shape_and_anchor():
    spec = builtin_drift("ou")
    p = _path(16)
    z = backward_states(spec, [1.0], p, 8)
    assert z.shape == (9, 1)
    assert z[8, 0] == 1.0
    with pytest.raises(InvalidArgument):
        backward_states(spec, [1.0], p, 17)


def test_overflow_reports_step():
    spec = builtin_drift("ou", {"theta": -1e8})
    with pytest.raises(NumericOverflow) as exc:
        solve_forward(spec, [1.0], _path(256))
    assert exc.value.step is not None


def test_dimension_mismatch():
    with pytest.raises(InvalidArgument):
        solve_forward(builtin_drift("zero", {"d": 2}), [0.0], _path())


def test_constant_drift_weight_closed_form():
    c = 0.7
    p = _path()
    w = girsanov_weight(builtin_drift("const", {"c": c}), [0.0], p)
    assert w.log_value == pytest.approx(c * p.terminal[0] - 0.5 * c * c, abs=1e-12)


def test_girsanov_reweighting_agrees():
    grid = TimeGrid(0.0, 1.0, 64)
    cmp = girsanov_comparison(builtin_drift("bump"), [0.0], lambda x: np.cos(x[..., 0]), grid, 20000, 4)
    assert cmp.z_score < 3
    assert abs(cmp.weight_mean.mean - 1) < 3 * cmp.weight_mean.se


def test_weight_moment_lognormal():
    c, eps = 0.5, 0.5
    grid = TimeGrid(0.0, 1.0, 32)
    diag = weight_moment_diagnostic(builtin_drift("const", {"c": c}), [0.0], eps, 20000, grid, 6)
    assert abs(diag.moment.mean - math.exp(0.5 * eps * (1 + eps) * c * c)) < 3 * diag.moment.se
    assert 0.9 < diag.stability_ratio < 1.1
    with pytest.raises(InvalidArgument):
        weight_moment_diagnostic(builtin_drift("const"), [0.0], 0.0, 10, grid)


def test_euler_start_offset_uses_later_nodes():
    # time-dependent drift would see nodes[start + j]; with time-homogeneous drift the result is shift-invariant
    spec = builtin_drift("softplus")
    p = _path(16)
    a = euler(spec, [0.2], p.increments[4:], p.grid, keep_path=False, start=4)
    b = euler(spec, [0.2], p.increments[4:], p.grid, keep_path=False)
    assert np.array_equal(a, b)
