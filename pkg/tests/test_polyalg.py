from fractions import Fraction as F

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from harnack_lab.fields import coords
from harnack_lab.polyalg import (
    DegreeOverflowError,
    DimensionMismatchError,
    Polynomial,
    TaylorError,
    derive,
    dumps,
    evaluate,
    indices_up_to,
    laplacian,
    loads,
    multiply,
    rescale,
    shift,
    taylor_coefficients,
    unit,
)

X1 = Polynomial.variable(2, 0)
X2 = Polynomial.variable(2, 1)


def test_eval_examples():
    assert evaluate(X1 * X2, (2, 3)) == 6
    assert evaluate(Polynomial.zero(2), (7.5, -1)) == 0
    P = 1 + X1 * X1 - X2 * X2 / 3
    assert evaluate(P, (F(1), F(1))) == F(5, 3)


def test_eval_batch_matches_pointwise():
    P = 1 + X1 * X1 - X2 * X2 / 3 + 2 * X1 * X2
    pts = np.random.default_rng(1).normal(size=(20, 2))
    batch = evaluate(P, pts)
    assert batch.shape == (20,)
    assert np.allclose(batch, [float(evaluate(P, p)) for p in pts])


def test_eval_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        evaluate(X1, (1.0, 2.0, 3.0))


def test_derive_examples():
    assert derive(X1 * X2 * X2, 1) == 2 * X1 * X2
    assert derive(X2 * X2 * X2, 0) == Polynomial.zero(2)
    a0, a1 = F(3, 7), F(-2, 5)
    assert derive(X2 * (a0 + a1 * X1), 1) == a0 + a1 * X1


def test_multiply_examples():
    assert multiply(X2, 1 + X1) == X2 + X1 * X2
    assert multiply(1 + X1, 1 - X1) == 1 - X1 * X1
    assert multiply(1 + X1, Polynomial.zero(2)) == Polynomial.zero(2)


def test_multiply_degree_cap():
    P = Polynomial.monomial((4, 0))
    with pytest.raises(DegreeOverflowError):
        multiply(P, P, max_degree=6)
    assert multiply(P, P, max_degree=6, truncate=6) == Polynomial.zero(2)


def test_dimension_mismatch_on_arithmetic():
    with pytest.raises(DimensionMismatchError):
        X1 + Polynomial.variable(3, 0)


def test_rescale_examples():
    assert rescale(X2, F(1, 2)) == 2 * X2
    c = Polynomial.constant(2, F(5, 3))
    assert rescale(c, F(1, 9)) == c
    assert rescale(X1 * X1, F(1, 4)) == 16 * X1 * X1


def test_rescale_rejects_nonpositive():
    with pytest.raises(ValueError):
        rescale(X1, 0)


def test_taylor_examples():
    x1, x2 = coords(2)
    assert taylor_coefficients(sp.exp(x1), 2, 2) == 1 + X1 + X1 * X1 / 2
    P = 1 + X1 - 3 * X1 * X2
    assert taylor_coefficients(P, 2) == P
    assert taylor_coefficients(sp.sin(x2), 3, 2) == X2 - X2 * X2 * X2 / 6


def test_taylor_is_exact_for_rational_series():
    x1, _ = coords(2)
    T = taylor_coefficients(1 / (1 - x1), 4, 2)
    assert T.is_exact
    assert all(a == 1 for _, a in T.items())


def test_taylor_singular_field():
    x1, _ = coords(2)
    with pytest.raises(TaylorError):
        taylor_coefficients(1 / x1, 1, 2)


def test_multi_index_helpers():
    assert unit(3, 2) == (0, 0, 1)
    assert shift((1, 0), (0, -1)) is None
    assert shift((1, 2), (1, -1)) == (2, 1)
    assert len(indices_up_to(2, 3)) == 10
    degrees = [sum(m) for m in indices_up_to(3, 4)]
    assert degrees == sorted(degrees)


def test_laplacian_of_harmonic():
    P = X2 + X1 * X1 * X2 - X2 * X2 * X2 / 3
    assert laplacian(P) == Polynomial.zero(2)


# -- property tests -----------------------------------------------------------

def rational_polys(dim=2, max_deg=4):
    coeff = st.fractions(min_value=-5, max_value=5, max_denominator=12)
    idx = st.sampled_from(indices_up_to(dim, max_deg))
    return st.dictionaries(idx, coeff, max_size=8).map(lambda d: Polynomial(dim, d))


points = st.tuples(st.floats(-1, 1), st.floats(-1, 1))


@settings(max_examples=60, deadline=None)
@given(P=rational_polys(), x=points, i=st.integers(0, 1))
def test_derive_matches_central_difference(P, x, i):
    Pf = P.to_float()
    x = np.array(x)
    exact = float(evaluate(derive(P, i), x))
    scale = 1 + Pf.norm()
    for h in (1e-3, 1e-4):
        e = np.zeros(2)
        e[i] = h
        fd = (evaluate(Pf, x + e) - evaluate(Pf, x - e)) / (2 * h)
        # central differences: O(h^2) truncation plus rounding
        assert abs(fd - exact) <= 50 * scale * h * h + 1e-9 * scale / h


@settings(max_examples=100, deadline=None)
@given(P=rational_polys(), Q=rational_polys(), x=points)
def test_product_evaluates_as_product(P, Q, x):
    lhs = float(evaluate(multiply(P.to_float(), Q.to_float()), x))
    rhs = float(evaluate(P.to_float(), x)) * float(evaluate(Q.to_float(), x))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12 * (1 + P.norm() * Q.norm()))


@settings(max_examples=60, deadline=None)
@given(P=rational_polys(dim=3, max_deg=3),
       r=st.fractions(min_value=F(1, 10), max_value=10, max_denominator=20))
def test_rescale_round_trip_exact(P, r):
    assert r > 0
    assert rescale(rescale(P, r), 1 / r) == P


@settings(max_examples=40, deadline=None)
@given(P=rational_polys(max_deg=5), order=st.integers(0, 5))
def test_taylor_is_a_projection(P, order):
    T = taylor_coefficients(P, order)
    assert T == P.truncate(order)
    assert taylor_coefficients(T, order) == T


@settings(max_examples=40, deadline=None)
@given(P=rational_polys(dim=3, max_deg=3))
def test_text_round_trip_exact(P):
    assert loads(dumps(P)) == P


def test_text_round_trip_float():
    P = (1 + X1 * 0.1 - X2 * X2 * 1e-17).to_float()
    Q = loads(dumps(P))
    assert Q == P
    assert not Q.is_exact


def test_sympy_conversion():
    x1, x2 = coords(2)
    P = 1 + X1 * X1 - X2 * X2 / 3
    assert sp.simplify(P.to_sympy((x1, x2)) - (1 + x1**2 - x2**2 / 3)) == 0
