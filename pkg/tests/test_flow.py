import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malflow.drift import builtin_drift
from malflow.errors import InvalidArgument
from malflow.flow import (check_flow_properties, hessian_fd_check, jacobian_fd_check, picard_series,
                          variational_flow)
from malflow.paths import SeedSpec, make_grid, sample_path
from malflow.sde import solve_forward


def _sol(spec, x0, n=256, seed=1, d=1):
    p = sample_path(SeedSpec(seed), make_grid(0.0, 1.0, n), d)
    return solve_forward(spec, x0, p), p


def test_ou_jacobian_is_power_of_euler_factor():
    theta = 1.3
    sol, p = _sol(builtin_drift("ou", {"theta": theta}), [0.5])
    jet = variational_flow(builtin_drift("ou", {"theta": theta}), sol, 64)
    dt = p.grid.dt
    for j in (64, 100, 256):
        assert jet.J(j)[0, 0] == pytest.approx((1 - theta * dt) ** (j - 64), rel=1e-12)
    # and within O(dt) of the continuous exp(-theta (t - s))
    assert abs(jet.J(256)[0, 0] - math.exp(-theta * 0.75)) < 2 * theta * dt


def test_ou_hessian_vanishes():
    sol, _ = _sol(builtin_drift("ou"), [0.5])
    assert np.all(variational_flow(builtin_drift("ou"), sol, 0).hessian == 0)


@pytest.mark.parametrize("d", [1, 2])
def test_jacobian_matches_finite_differences(d):
    spec = builtin_drift("softplus", {"a": 1.0, "d": d})
    p = sample_path(SeedSpec(4), make_grid(0.0, 1.0, 1024), d)
    for h in np.eye(d):
        assert jacobian_fd_check(spec, np.full(d, 0.2), p, h, eps=1e-4).rel_error <= 1e-3


def test_hessian_matches_finite_differences():
    spec = builtin_drift("softplus", {"a": 1.0})
    p = sample_path(SeedSpec(5), make_grid(0.0, 1.0, 512), 1)
    assert hessian_fd_check(spec, [0.1], p, [1.0], eps=1e-3).rel_error <= 1e-3


def test_flow_property_is_exact():
    spec = builtin_drift("softplus", {"d": 2})
    _, p = _sol(spec, [0.0, 0.0], d=2)
    rep = check_flow_properties(spec, [0.3, -0.1], p, 10, 100, 200)
    assert rep.passed
    with pytest.raises(InvalidArgument):
        check_flow_properties(spec, [0.0, 0.0], p, 5, 4, 10)


@settings(max_examples=15, deadline=None)
@given(s=st.integers(0, 100), seed=st.integers(0, 1000))
def test_full_picard_sum_reproduces_euler_product(s, seed):
    # the left-point series summed to all orders is exactly the ordered product of (I + A_j dt)
    spec = builtin_drift("softplus", {"d": 2})
    sol, _ = _sol(spec, [0.1, 0.2], n=128, seed=seed, d=2)
    jet = variational_flow(spec, sol, s, hessian=False)
    pt = picard_series(spec, sol, s, 30)
    assert np.allclose(pt.partial_sums[-1], jet.J(128), rtol=1e-12, atol=1e-14)


def test_literal_order_differs_for_noncommuting_jacobians():
    from malflow.drift import DriftSpec

    # off-diagonal Jacobians at different times do not commute
    def f(t, x):
        return np.stack([np.sin(x[..., 1]), np.sin(x[..., 0]) * 0.5], axis=-1)

    def df(t, x):
        z = np.zeros(x.shape + (2,))
        z[..., 0, 1] = np.cos(x[..., 1])
        z[..., 1, 0] = 0.5 * np.cos(x[..., 0])
        return z

    spec = DriftSpec("rot", 2, 1, f, (df,), 1.0, (1.0, 1.0))
    sol, _ = _sol(spec, [0.3, -0.4], n=256, d=2)
    a = picard_series(spec, sol, 0, 4, order="ode").partial_sums[-1]
    b = picard_series(spec, sol, 0, 4, order="literal").partial_sums[-1]
    assert not np.allclose(a, b)
    assert np.allclose(a, variational_flow(spec, sol, 0).J(256), atol=1e-2)


def test_picard_guards():
    spec = builtin_drift("ou")
    sol, _ = _sol(spec, [0.0])
    with pytest.raises(InvalidArgument):
        picard_series(spec, sol, 0, 31)
    with pytest.raises(InvalidArgument):
        picard_series(spec, sol, 0, -1)
    with pytest.raises(InvalidArgument):
        picard_series(spec, sol, 10, 3, t_index=5)


def test_step_size_guard():
    spec = builtin_drift("ou", {"theta": 100.0})
    sol, _ = _sol(spec, [0.0], n=64)
    with pytest.raises(InvalidArgument, match="too coarse"):
        variational_flow(spec, sol, 0)


def test_hessian_needs_k2():
    relu = builtin_drift("relu")
    sol, _ = _sol(relu, [0.0])
    assert variational_flow(relu, sol, 0).hessian is None
    from malflow.errors import CapabilityError
    with pytest.raises(CapabilityError):
        variational_flow(relu, sol, 0, hessian=True)
