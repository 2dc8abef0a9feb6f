import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from malflow.drift import DerivativeWord, builtin_drift
from malflow.errors import InvalidArgument
from malflow.shuffles import (Poly, check_moment_bound, enumerate_shuffles, exact_simplex_integral, rhs_core,
                              simplex_quad, verify_shuffle2_identity, verify_shuffle_identity)


@pytest.mark.parametrize("m,n", [(0, 0), (0, 3), (2, 2), (3, 4), (6, 6), (1, 11)])
def test_shuffle_count_is_binomial(m, n):
    S = enumerate_shuffles(m, n)
    assert len(S) == math.comb(m + n, m)
    for sig in S.permutations:
        assert sorted(sig) == list(range(1, m + n + 1))
        assert list(sig[:m]) == sorted(sig[:m]) and list(sig[m:]) == sorted(sig[m:])


@pytest.mark.parametrize("m,n", [(2, 1), (3, 2), (4, 1)])
def test_pinned_count(m, n):
    for k in range(m + 1):
        # the last m-k first-block slots are fixed; the rest interleave freely
        assert len(enumerate_shuffles(m, n, k)) == math.comb(k + n, n)
    assert enumerate_shuffles(m, n, m).permutations == enumerate_shuffles(m, n).permutations


def test_enumeration_guards():
    with pytest.raises(InvalidArgument):
        enumerate_shuffles(7, 6)
    with pytest.raises(InvalidArgument):
        enumerate_shuffles(2, 2, 3)


def test_exact_simplex_volume():
    for m in range(6):
        assert exact_simplex_integral([Poly([1])] * m, Fraction(1, 3), Fraction(2)) == Fraction(5, 3) ** m / math.factorial(m)


def test_exact_constant_factors():
    cs = [2, -3, 5]
    val = exact_simplex_integral([Poly([c]) for c in cs], Fraction(0), Fraction(1))
    assert val == Fraction(2 * -3 * 5, 6)


def test_exact_against_symbolic_quadrature():
    # int_{0<u<v<1} u * v^2 dv du = int_0^1 u (1 - u^3)/3 du = 1/6 - 1/15
    assert exact_simplex_integral([Poly([0, 1]), Poly([0, 0, 1])], Fraction(0), Fraction(1)) == Fraction(1, 6) - Fraction(1, 15)


@pytest.mark.parametrize("method,tol", [("left", 5e-3), ("trapezoid", 1e-6), ("richardson", 1e-10)])
def test_simplex_quad_symmetric_product(method, tol):
    # for identical factors the ordered integral is (int f)^m / m!
    s, t, m = 0.2, 1.7, 3
    exact = (math.sin(t) - math.sin(s)) ** m / math.factorial(m)
    q = simplex_quad(np.cos, s, t, m, n_sub=1000, method=method)
    assert abs(q.value - exact) < tol


def test_polynomials_exact_vs_quadrature():
    fs = [Poly([1, 2]), Poly([0, 1, 1]), Poly([3, -1])]
    q = simplex_quad(fs, 0.0, 1.0, n_sub=4000, method="richardson")
    assert q.value == pytest.approx(float(exact_simplex_integral(fs, Fraction(0), Fraction(1))), abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(m=st.integers(1, 3), n=st.integers(1, 3), a=st.floats(0.1, 2.0))
def test_shuffle_identity_smooth_factors(m, n, a):
    r = verify_shuffle_identity([lambda u: np.exp(a * u)] * m, [np.cos] * n, m, n, 0.0, 1.0, n_sub=2000)
    assert r.residual < 1e-9


def test_shuffle_identity_polynomial_oracle():
    r = verify_shuffle_identity([Poly([1, 2]), Poly([0, 1])], [Poly([2, 0, 1])] * 2, 2, 2, 0.0, 1.0, 4000)
    assert r.exact is not None and r.oracle_residual < 1e-10
    assert r.n_terms == 6


@pytest.mark.parametrize("k", [0, 1, 2])
def test_pinned_identity_polynomial_oracle(k):
    fs = [Poly([1, 1]), Poly([0, 2]), Poly([1, 0, 1]), Poly([3])]
    r = verify_shuffle2_identity(fs, k, 2, 2, 0.0, 1.0, 4000)
    assert r.oracle_residual < 1e-10


def test_pinned_identity_smooth_factors():
    r = verify_shuffle2_identity([np.sin, np.cos, np.exp], 1, 2, 1, 0.0, 1.5, 2000)
    assert r.residual < 1e-9


def test_identity_order_guard():
    with pytest.raises(InvalidArgument):
        verify_shuffle_identity(np.cos, np.cos, 4, 3)


def test_rhs_core_formula():
    v = rhs_core([2.0, 3.0, 0.5], 0.0, 4.0)
    assert v == pytest.approx(3.0 * 4.0**1.5 / math.gamma(2.5))


def test_moment_bound_order_one_against_heat_kernel():
    b = builtin_drift("bump", {"center": 0.5})
    w = DerivativeWord(((0,),), (b,))
    st_ = check_moment_bound(w, 0.0, 1.0, n_paths=40000, n_sub=256, seed=2)

    def integrand(x, u):
        return b(0.0, np.array([[x]]))[0, 0] * stats.norm.pdf(x, 0, math.sqrt(u))

    # E int_0^1 b(B_u) du, with the u = 0 contribution b(0) handled by the kernel limit
    exact, _ = integrate.dblquad(integrand, 1e-9, 1.0, -0.5, 1.5, epsabs=1e-10)
    assert abs(st_.signed_mean - exact) <= 3 * st_.se + exact * 2 / 256
    assert st_.ratio_root == pytest.approx(st_.lhs / st_.rhs_core)


def test_moment_bound_guards():
    with pytest.raises(InvalidArgument):
        check_moment_bound(DerivativeWord(((0,),), (builtin_drift("ou"),)), 0.0, 1.0, 10)
