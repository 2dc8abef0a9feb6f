import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malflow.drift import DerivativeWord, builtin_drift, fd_consistency, validate_hypotheses, with_bounds
from malflow.errors import CapabilityError, InvalidArgument

FAMILIES = [("zero", {}), ("const", {"c": 0.7}), ("ou", {"theta": 1.3}), ("softplus", {"a": 0.8, "c": 0.2}),
            ("bump", {"amp": 1.5, "center": 0.3, "radius": 0.8})]


@pytest.mark.parametrize("name,params", FAMILIES + [("relu", {})])
def test_declared_bounds_hold(name, params):
    spec = builtin_drift(name, params)
    rep = validate_hypotheses(spec, (-6, 6), n_probes=4000, seed=1)
    assert rep.passed, rep.failures


def test_validator_catches_understated_bound():
    spec = with_bounds(builtin_drift("softplus"), deriv_bounds=(math.inf, 0.1, 0.25, 0.1, 0.125))
    assert not validate_hypotheses(spec).passed


@pytest.mark.parametrize("name,params", FAMILIES)
def test_derivatives_match_differences(name, params):
    spec = builtin_drift(name, params)
    x = np.array([0.41])
    for j in range(1, spec.k):
        h = 1e-5
        fd = (spec.derivative(j, 0.0, x + h) - spec.derivative(j, 0.0, x - h)) / (2 * h)
        assert np.allclose(spec.derivative(j + 1, 0.0, x)[..., 0], fd, rtol=1e-5, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-3, 3))
def test_softplus_fd_error_is_second_order(x):
    spec = builtin_drift("softplus", {"a": 1.0})
    errs = fd_consistency(spec, np.array([x]), np.array([1.0]), [1e-2, 5e-3])
    # halving h divides a cubic remainder by 8 (loose: 3 to allow rounding)
    assert errs[1] <= errs[0] / 3 + 1e-14


def test_derivative_order_guard():
    relu = builtin_drift("relu")
    with pytest.raises(CapabilityError, match="k >= 2"):
        relu.derivative(2, 0.0, np.array([1.0]))
    with pytest.raises(CapabilityError):
        relu.require(2, "anything")


def test_multidimensional_shapes():
    spec = builtin_drift("softplus", {"d": 3})
    x = np.zeros((5, 3))
    assert spec(0.0, x).shape == (5, 3)
    assert spec.derivative(1, 0.0, x).shape == (5, 3, 3)
    assert spec.derivative(2, 0.0, x).shape == (5, 3, 3, 3)
    D = spec.derivative(1, 0.0, x)[0]
    assert np.allclose(D, np.diag(np.diag(D)))


def test_bump_is_compactly_supported():
    b = builtin_drift("bump", {"center": 1.0, "radius": 0.5})
    assert b(0.0, np.array([[1.6], [0.4]])).ravel().tolist() == [0.0, 0.0]
    assert b(0.0, np.array([[1.0]]))[0, 0] == pytest.approx(1.0)


def test_unknown_family():
    with pytest.raises(InvalidArgument):
        builtin_drift("nope")
    with pytest.raises(InvalidArgument):
        builtin_drift("bump", {"d": 2})


def test_derivative_word():
    b = builtin_drift("bump", {"center": 0.5})
    w = DerivativeWord(((1,), (0,)), (b, b))
    x = np.array([[0.2]])
    assert w.m == 2
    assert w.evaluate(0, 0.0, x) == pytest.approx(b.derivative(1, 0.0, x)[0, 0, 0])
    assert w.evaluate(1, 0.0, x) == pytest.approx(b(0.0, x)[0, 0])
    assert w.sup_norms() == [b.sup_norm, b.sup_norm]
    with pytest.raises(InvalidArgument):
        DerivativeWord(((2,),), (b,))
