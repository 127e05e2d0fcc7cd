from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.jetcore import JetArray, JetSpace
from artifact.puiseux import (CurveLadder, PuiseuxError, PuiseuxPoly, UniformityError, curve_ladder_validate,
                              leading_coefficient, leading_order, puiseux_derivative, uniformity_exponent)

terms = st.lists(st.tuples(st.fractions(min_value=0, max_value=4, max_denominator=4),
                           st.fractions(min_value=-3, max_value=3, max_denominator=5)),
                 max_size=4)


def oracle_eval(ts, x):
    """Exact value at a rational x that is a perfect power for every exponent used."""
    return sum(float(c) * float(x) ** float(e) for e, c in ts)


@settings(max_examples=80, deadline=None)
@given(terms, terms)
def test_product_matches_termwise_oracle(a, b):
    A, B = PuiseuxPoly.from_terms(a), PuiseuxPoly.from_terms(b)
    expect = {}
    for ea, ca in a:
        for eb, cb in b:
            expect[ea + eb] = expect.get(ea + eb, 0) + ca * cb
    got = {e: c for e, c in (A * B).terms()}
    assert got == {e: c for e, c in expect.items() if c != 0}


@settings(max_examples=60, deadline=None)
@given(terms, terms)
def test_sum_and_evaluate(a, b):
    A, B = PuiseuxPoly.from_terms(a), PuiseuxPoly.from_terms(b)
    for x in (0.3, 1.7):
        assert (A + B).evaluate(x) == pytest.approx(oracle_eval(a + b, x), abs=1e-9)


def test_canonical_ramification():
    p = PuiseuxPoly({2: 1, 4: 3}, N=4)
    assert p.N == 2 and p.coeffs == {1: 1, 2: 3}
    assert p == PuiseuxPoly.from_terms([(Fraction(1, 2), 1), (1, 3)])


def test_truncation_propagates():
    a = PuiseuxPoly({1: 1}, trunc=3)
    b = PuiseuxPoly({2: 1})
    assert (a * b).trunc_exponent == 5
    assert (a + PuiseuxPoly({5: 1})).coeffs == {1: 1}


def test_leading_data_and_derivative():
    p = PuiseuxPoly.from_terms([(Fraction(1, 3), 2), (2, -1)])
    assert leading_order(p) == Fraction(1, 3)
    assert leading_coefficient(p) == 2
    d = puiseux_derivative(p)
    assert dict(d.terms()) == {Fraction(-2, 3): Fraction(2, 3), 1: -2}
    with pytest.raises(PuiseuxError):
        leading_order(PuiseuxPoly())


def test_on_jets_matches_derivatives():
    p = PuiseuxPoly.from_terms([(Fraction(3, 2), 1), (2, Fraction(1, 2))])
    X = JetArray.variable(JetSpace(1, 3), [0.25, 0.5], 0)
    J = p.on_jets(X)
    for k in range(4):
        assert np.allclose(J.partial((k,)), p.evaluate(X.value, k), rtol=1e-12)


def test_ladder_validation():
    x = PuiseuxPoly({1: 1})
    ok, d = curve_ladder_validate(CurveLadder([PuiseuxPoly(), PuiseuxPoly({2: 1}), x], 1.0))
    assert ok and d == pytest.approx(1.0, rel=1e-6)
    # 2x^2 crosses x at 1/2
    ok, d = curve_ladder_validate(CurveLadder([PuiseuxPoly(), PuiseuxPoly({2: 2}), x], 1.0))
    assert ok and d == pytest.approx(0.5, rel=1e-6) and d < 0.5
    ok, _ = curve_ladder_validate(CurveLadder([PuiseuxPoly(), PuiseuxPoly({1: 2}), x], 1.0))
    assert not ok


def log_grid():
    return np.logspace(-6, 0, 64), np.logspace(-12, 0, 64)


@pytest.mark.parametrize("q", [1, 2, 3, 5])
def test_uniformity_recovers_root(q):
    xs, ys = log_grid()
    F = np.ones_like(xs)[:, None] * ys[None, :] ** (1.0 / q)
    N, A = uniformity_exponent(xs, ys, F)
    assert N == q and np.allclose(A, 1.0)


def test_uniformity_rejects_non_decaying():
    xs, ys = log_grid()
    with pytest.raises(UniformityError):
        uniformity_exponent(xs, ys, np.ones((64, 64)))
