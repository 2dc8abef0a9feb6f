import math

import numpy as np
import pytest
from scipy import stats

from malflow.density import (default_y_grid, duality_check, estimate_density, gaussian_density_derivative,
                             kde_baseline, oracle_density, require_density_order, skorokhod_of_scaled, tangents,
                             terminal_samples, weight_chain, weights_from_tangents)
from malflow.drift import builtin_drift
from malflow.errors import CapabilityError, InvalidArgument
from malflow.paths import SeedSpec, make_grid, sample_increments, sample_path
from malflow.sde import solve_forward


def test_zero_drift_weights_are_explicit():
    g = make_grid(0.0, 2.0, 64)
    dB = sample_increments(1, g, 1, 0, 5)
    X, A1, A2, A3 = tangents(builtin_drift("zero"), 0.3, dB, g, 3)
    assert np.allclose(A1, 2.0) and np.all(A2 == 0) and np.all(A3 == 0)
    BT = dB[:, :, 0].sum(axis=1)
    F, G = weights_from_tangents(BT, A1, A2, A3, 2.0, 2)
    assert np.allclose(G[1], BT / 2.0)
    # second weight for Brownian motion: (B_T^2 - T) / T^2
    assert np.allclose(G[2], (BT**2 - 2.0) / 4.0)


def test_tangent_one_is_integrated_malliavin_derivative():
    from malflow.malliavin import malliavin_first

    spec = builtin_drift("softplus", {"a": 1.0})
    p = sample_path(SeedSpec(3), make_grid(0.0, 1.0, 128))
    sol = solve_forward(spec, [0.1], p)
    jet = malliavin_first(spec, sol)
    direct = math.fsum(jet.D1[1:, 128, 0, 0] * p.grid.dt)
    _, A1, _, _ = tangents(spec, 0.1, p.increments[None], p.grid, 1)
    assert A1[0] == pytest.approx(direct, rel=1e-12)


def test_grid_derivative_route_agrees_with_tangent():
    spec = builtin_drift("softplus", {"a": 1.0, "c": 0.3})
    p = sample_path(SeedSpec(8), make_grid(0.0, 1.0, 64))
    wc = weight_chain(spec, solve_forward(spec, [0.0], p), i_max=1, grid_derivative=True)
    F = wc.F
    integral = math.fsum(wc.DsF * p.grid.dt)
    assert integral == pytest.approx(-wc.tangents[1] * F * F, rel=0.1)
    assert wc.G[1] == pytest.approx(F * p.terminal[0] + wc.tangents[1] * F * F, rel=1e-12)


def test_weight_chain_at_interior_node():
    spec = builtin_drift("zero")
    p = sample_path(SeedSpec(2), make_grid(0.0, 1.0, 64))
    wc = weight_chain(spec, solve_forward(spec, [0.0], p), t_index=32, i_max=1)
    assert wc.F == pytest.approx(2.0)
    assert wc.G[1] == pytest.approx(p.values[32, 0] / 0.5)


def test_skorokhod_of_constant():
    p = sample_path(SeedSpec(1), make_grid(0.0, 1.0, 16))
    assert skorokhod_of_scaled(2.0, np.zeros(16), p) == pytest.approx(2.0 * p.terminal[0])


def test_duality_holds():
    rep = duality_check(builtin_drift("softplus"), 0.0, 1.0, 20000, seed=2, n_steps=64)
    assert rep.z_score < 3


@pytest.mark.parametrize("order", [0, 1])
def test_ou_density_within_three_se(order):
    x0, theta = 0.4, 0.8
    orc = oracle_density("ou", {"theta": theta}, x0, 1.0, [0.0], order)
    mean, var = orc.extra["mean"], orc.extra["var"]
    y = mean + math.sqrt(var) * np.array([-1.0, 0.0, 1.0])
    est = estimate_density(builtin_drift("ou", {"theta": theta}), x0, 1.0, y, order, 40000, seed=order,
                           n_steps=256)
    exact = oracle_density("ou", {"theta": theta}, x0, 1.0, y, order).values
    assert np.all(np.abs(est.values - exact) <= 3 * est.std_errors)


def test_estimate_independent_of_worker_count():
    spec = builtin_drift("softplus")
    a = estimate_density(spec, 0.0, 1.0, [0.0, 0.5], 0, 20000, seed=4, n_steps=32, workers=1)
    b = estimate_density(spec, 0.0, 1.0, [0.0, 0.5], 0, 20000, seed=4, n_steps=32, workers=3)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.std_errors, b.std_errors)


def test_capability_thresholds():
    with pytest.raises(CapabilityError, match="k >= 2"):
        require_density_order(builtin_drift("relu"), 0)
    with pytest.raises(CapabilityError, match="k >= 2"):
        estimate_density(builtin_drift("relu"), 0.0, 1.0, [0.0], order=1, n_paths=10)
    with pytest.raises(CapabilityError):
        require_density_order(builtin_drift("softplus"), 2)
    with pytest.raises(InvalidArgument):
        require_density_order(builtin_drift("softplus"), -1)
    require_density_order(builtin_drift("softplus"), 1)


def test_kde_baseline_on_gaussian_samples():
    x = stats.norm.rvs(size=50000, random_state=np.random.default_rng(1))
    y = np.linspace(-2, 2, 9)
    k = kde_baseline(x, y)
    assert np.max(np.abs(k.values - stats.norm.pdf(y))) < 0.01
    with pytest.raises(InvalidArgument):
        kde_baseline([], y)


def test_terminal_samples_match_kde_and_malliavin():
    spec = builtin_drift("softplus", {"a": 0.5})
    y = np.array([0.0, 0.5])
    xs = terminal_samples(spec, 0.0, 1.0, 40000, seed=5, n_steps=64)
    k = kde_baseline(xs, y)
    m = estimate_density(spec, 0.0, 1.0, y, 0, 40000, seed=6, n_steps=64)
    assert np.all(np.abs(k.values - m.values) < 3 * np.hypot(k.std_errors, m.std_errors) + 0.01)


def test_gaussian_oracle_matches_scipy():
    y = np.linspace(-3, 3, 13)
    assert np.allclose(gaussian_density_derivative(y, 0.5, 2.0, 0), stats.norm.pdf(y, 0.5, math.sqrt(2.0)))
    h = 1e-5
    fd = (stats.norm.pdf(y + h, 0.5, math.sqrt(2.0)) - stats.norm.pdf(y - h, 0.5, math.sqrt(2.0))) / (2 * h)
    assert np.allclose(gaussian_density_derivative(y, 0.5, 2.0, 1), fd, atol=1e-9)
    assert default_y_grid(0.0, 1.0, 5).tolist() == [-4.0, -2.0, 0.0, 2.0, 4.0]
    with pytest.raises(InvalidArgument):
        oracle_density("relu", {}, 0.0, 1.0, y)
