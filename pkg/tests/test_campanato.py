import json
from fractions import Fraction as F

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import pair, samples, solve, system
from harnack_lab import fields
from harnack_lab.approx import build_system
from harnack_lab.campanato import (
    QuotientError,
    RankDeficiencyError,
    Samples,
    decay_profile,
    dyadic_scales,
    fit_scale,
    holder_estimate,
    holder_norm_proxy,
    quotient_field,
    quotient_max_error,
    spread,
    sup_on_ball,
)
from harnack_lab.domain import synthetic_pair
from harnack_lab.elliptic import Grid, GridField, fit_order
from harnack_lab.fields import coords
from harnack_lab.polyalg import Polynomial, taylor_coefficients

x1, x2 = coords(2)
Q_CONFORMAL = 2 * x1 - sp.Rational(2, 5) * x1 * x2


def exact_fields(p, N):
    """Grid fields of the exact u, v of a pair (no solve)."""
    grid = Grid(p.n, N, p.domain)
    _, u_y, v_y, _ = p.flattened()
    return grid, GridField(grid, grid.node_values(u_y)), GridField(grid, grid.node_values(v_y))


def exact_samples(p, N):
    grid, u, v = exact_fields(p, N)
    return Samples(grid.physical_points, u.values, v.values, boundary=grid.boundary_mask)


# -- quotient ------------------------------------------------------------------

def test_proportional_pair_quotient():
    grid = Grid(2, 16)
    u = GridField(grid, grid.node_values(x2))
    v = GridField(grid, 2 * u.values)
    q = quotient_field(u, v)
    assert np.abs(q.values - 2).max() < 1e-12


def test_flat_model_face_values():
    grid = Grid(2, 16)
    u = GridField(grid, grid.node_values(x2))
    v = GridField(grid, grid.node_values(2 * x1 * x2))
    q = quotient_field(u, v)
    face = grid.flat_face_mask
    assert np.abs(q.values[face] - 2 * grid.points[face, 0]).max() < 1e-12


def test_conformal_face_quotient_converges():
    p = pair("conformal")
    errs, Ns = [], [16, 32, 64]
    for N in Ns:
        grid, u, v = exact_fields(p, N)
        q = quotient_field(u, v)
        face = grid.flat_face_mask
        ref = fields.numeric(Q_CONFORMAL, 2)(grid.physical_points[face])
        errs.append(np.abs(q.values[face] - ref).max())
    # the flat-chart fields are cubic in y_n, so the face stencil is exact up to rounding
    for N, e in zip(Ns, errs):
        assert e <= (1 / N) ** 2 * 1e-6


def test_quotient_errors():
    grid = Grid(2, 8)
    u = GridField(grid, grid.node_values(x2 - sp.Rational(1, 2)))
    with pytest.raises(QuotientError):
        quotient_field(u, u)
    flat = GridField(grid, grid.node_values(x2**2))
    with pytest.raises(QuotientError):
        quotient_field(flat, flat)


# -- fitting ------------------------------------------------------------------

def test_plant_and_recover():
    p = pair("conformal")
    s = exact_samples(p, 128)
    sys = system("conformal", 2)
    fit = fit_scale(s, 0.25, sys)
    truth = taylor_coefficients(Q_CONFORMAL, 2, 2).to_float()
    assert fit.E < 1e-12
    assert (fit.P - truth).norm() < 1e-8
    assert fit.constraint_residual < 1e-10


def test_unit_quotient_recovered():
    p = pair("conformal")
    grid, u, _ = exact_fields(p, 64)
    s = Samples(grid.physical_points, u.values, u.values.copy())
    fit = fit_scale(s, 0.5, system("conformal", 1))
    assert fit.P[(0, 0)] == pytest.approx(1, abs=1e-12)
    assert all(abs(a) < 1e-12 for m, a in fit.P.items() if m != (0, 0))


def test_linear_manufactured_recovers_x1():
    name = "flattened-linear"
    s = samples(name, 256)
    sys = system(name, 1)
    alpha = 0.5
    fits = [fit_scale(s, r, sys) for r in [1 / 4, 1 / 8, 1 / 16, 1 / 32, 1 / 64]]
    for fit in fits:
        assert (fit.P - Polynomial.variable(2, 0)).norm() < 1e-8
    normalized = [fit.E / fit.r ** (2 + alpha) for fit in fits]
    assert max(normalized) < 1e-3


def test_too_few_nodes():
    with pytest.raises(ValueError):
        fit_scale(exact_samples(pair("conformal"), 16), 0.05, system("conformal", 2))


def test_rank_deficiency_detected():
    grid = Grid(2, 32)
    pts = grid.points.copy()
    pts[:, 0] = 0.0  # collapse x1: the x1 columns become zero
    s = Samples(pts, grid.node_values(x2), grid.node_values(x2))
    with pytest.raises(RankDeficiencyError):
        fit_scale(s, 0.5, system("conformal", 1))


def test_constraint_exactness_and_monotone_restriction():
    s = samples("flattened", 256)
    sys = system("flattened", 2)
    for r in dyadic_scales(0.5, 0.5, 3):
        fit = fit_scale(s, r, sys)
        assert fit.constraint_residual <= 1e-10
        for rr in (r / 2, r / 3):
            m = s.within(rr)
            inner = np.abs(s.v[m] - s.u[m] * fit.P(s.points[m])).max()
            assert inner <= fit.E


@settings(max_examples=20, deadline=None)
@given(r=st.floats(0.15, 0.6), shrink=st.floats(0.1, 0.99))
def test_restriction_never_increases_error(r, shrink):
    s = exact_samples(pair("conformal"), 32)
    sys = system("conformal", 1)
    fit = fit_scale(s, r, sys)
    m = s.within(r * shrink)
    if m.any():
        assert np.abs(s.v[m] - s.u[m] * fit.P(s.points[m])).max() <= fit.E


# -- decay --------------------------------------------------------------------

def test_conformal_k1_exponent():
    rep = decay_profile(samples("conformal", 256), system("conformal", 1), dyadic_scales(0.5, 0.5, 3))
    assert rep.status == "ok"
    assert rep.fitted_exponent >= 2.4
    assert not rep.violation


def test_exact_samples_analytic_quotient_k2():
    p = pair("flattened")
    rep = decay_profile(exact_samples(p, 256), system("flattened", 2), dyadic_scales(0.5, 0.5, 5))
    assert len(rep.measured) == 5
    assert rep.fitted_exponent >= 3.4


def test_negative_control_is_flagged():
    p = synthetic_pair("Abs(x1)**(6/5)*(1+x2)")
    sys = build_system(p.op, taylor_coefficients(p.u_exact, 2, 2), k=2)
    rep = decay_profile(exact_samples(p, 256), sys, dyadic_scales(0.5, 0.5, 4))
    assert 2.0 <= rep.fitted_exponent < 3.4
    assert rep.violation


def test_exact_quotient_status():
    p = pair("conformal")
    rep = decay_profile(exact_samples(p, 64), system("conformal", 2), dyadic_scales(0.5, 0.5, 2))
    assert rep.status == "exact quotient"
    assert rep.fitted_exponent is None
    assert rep.exponent_ok and not rep.violation


def test_insufficient_scales_status():
    s = samples("conformal", 256)
    s.v_err = s.v_err * 1e6  # pretend the grid error is huge
    rep = decay_profile(s, system("conformal", 1), dyadic_scales(0.5, 0.5, 3))
    assert rep.status == "insufficient scales above error floor"
    assert rep.fitted_exponent is None
    assert rep.violation


def test_scales_must_decrease():
    with pytest.raises(ValueError):
        decay_profile(samples("conformal", 128), system("conformal", 1), [0.25, 0.5])
    with pytest.raises(ValueError):
        dyadic_scales(0.5, 1.5)


def test_report_outputs():
    grid, u, v, q = solve("conformal", 128)
    rep = decay_profile(samples("conformal", 128), system("conformal", 1), dyadic_scales(0.5, 0.5, 3),
                        quotient=q, quotient_exact=Q_CONFORMAL, annulus=True)
    a, b = rep.to_json(timestamp=False), rep.to_json(timestamp=False)
    assert a == b
    data = json.loads(rep.to_json())
    assert "created" in data and data["schema_version"] == 1
    assert data["measured_scales"] == rep.measured
    assert len(data["scales"]) == 3
    assert all(s["annulus_holder"] is not None for s in data["scales"])
    csv = rep.to_csv().splitlines()
    assert csv[0] == "r,E_r,ratio_E_r,drift_coeff,drift_sup,constraint_residual"
    assert len(csv) == 4
    assert rep.plot_csv().startswith("log_r,log_E_r,measured\n")
    assert rep.quotient_error < 1e-5
    assert rep.holder == pytest.approx(0.2, rel=0.2)


def test_sup_on_ball_and_spread():
    P = Polynomial.variable(2, 0) * 3
    assert sup_on_ball(P, 0.5) == pytest.approx(1.5)
    assert sup_on_ball(Polynomial.zero(2), 1) == 0
    assert spread([1, 2, 3]) == 3
    assert spread([0, 1]) == float("inf")


# -- scaling covariance ---------------------------------------------------------

@pytest.mark.parametrize("r0", [F(1, 2), F(2, 3)])
@pytest.mark.parametrize("name,k", [("conformal", 1), ("flattened", 2)])
def test_scaling_covariance(name, k, r0):
    p = pair(name)
    pr = p.rescaled(r0)
    grid = Grid(2, 128, p.domain)
    X = grid.physical_points
    orig = Samples.exact(p.u_exact, p.v_exact, X)
    resc = Samples.exact(pr.u_exact, pr.v_exact, X / float(r0))
    s_scales = [0.5, 0.25, 0.125]
    a = decay_profile(orig, system(name, k), [float(r0) * s for s in s_scales])
    bsys = build_system(pr.op, taylor_coefficients(pr.u_exact, k, 2), k=k)
    b = decay_profile(resc, bsys, s_scales)
    for sa, sb in zip(a.scales, b.scales):
        assert sb.E == pytest.approx(sa.E / float(r0), rel=1e-9)
        assert sb.ratio == pytest.approx(sa.ratio, rel=1e-9)


# -- Hoelder ---------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2])
@pytest.mark.parametrize("N", [64, 128])
def test_holder_of_polynomial_is_small(k, N):
    p = pair("conformal")
    grid = Grid(2, N, p.domain)
    qpoly = Q_CONFORMAL if k == 2 else sp.Integer(3) - x1 / 2 + 2 * x2
    q = GridField(grid, grid.node_values(qpoly, physical=True))
    assert holder_estimate(q, k, 0.5) <= 10 * grid.h


def test_holder_conformal_truth():
    p = pair("conformal")
    grid = Grid(2, 128, p.domain)
    q = GridField(grid, grid.node_values(Q_CONFORMAL, physical=True))
    # grad q = (2 - 0.4 x2, -0.4 x1): |grad q(x) - grad q(y)| = 0.4 |x - y|
    capped = 0.4 * 0.25**0.5
    assert holder_estimate(q, 1, 0.5) == pytest.approx(capped, rel=0.2)
    mask = np.linalg.norm(grid.physical_points, axis=1) <= 0.5
    pts = grid.physical_points[mask]
    diam = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]))
    assert holder_estimate(q, 1, 0.5, dmax=1.0) == pytest.approx(0.4 * diam**0.5, rel=0.2)


def test_holder_blowup_detection():
    alpha, alpha_p = 0.5, 0.2
    values = []
    for N in (64, 128, 256):
        grid = Grid(2, N)
        q = GridField(grid, grid.node_values(sp.Abs(x1) ** sp.Rational(6, 5)))
        values.append(holder_estimate(q, 1, alpha))
    for a, b in zip(values, values[1:]):
        assert b / a >= 0.9 * 2 ** (alpha - alpha_p)


def test_holder_stable_on_solved_fields():
    for name, k in (("conformal", 1), ("flattened", 2)):
        h1 = holder_estimate(solve(name, 128)[3], k, 0.5)
        h2 = holder_estimate(solve(name, 256)[3], k, 0.5)
        assert abs(h2 - h1) / h1 < 0.25


def test_holder_arguments():
    grid = Grid(2, 16)
    q = GridField(grid, grid.node_values(x1))
    with pytest.raises(ValueError):
        holder_estimate(q, 4, 0.5)
    assert holder_norm_proxy(q, 1, 0.5) == pytest.approx(1.0, abs=1e-9)
    assert holder_estimate(q, 1, 0.5, seed=3) == holder_estimate(q, 1, 0.5, seed=3)


def test_quotient_max_error_conformal():
    errs = [quotient_max_error(solve("conformal", N)[3], Q_CONFORMAL) for N in (64, 128, 256)]
    assert fit_order([1 / 64, 1 / 128, 1 / 256], errs) >= 1.7
