"""Scale-by-scale decay measurement for ``v - uP`` and Hoelder seminorms of v/u.

At every scale r the free coefficients ``{a_m : m_n = 0}`` of P are chosen by
discrete least squares over the nodes of ``Omega ∩ B_r``; the determined
coefficients come from the approximating-polynomial system, so every fitted P
is approximating by construction.
"""
from __future__ import annotations

import datetime as _dt
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import fields
from .approx import ApproxSystem, solve_system
from .elliptic import Grid, GridField
from .polyalg import Polynomial, indices_up_to

SCHEMA_VERSION = 1
FLOOR_FACTOR = 50.0
SPREAD_LIMIT = 3.0
EXPONENT_SLACK = 0.1


class RankDeficiencyError(ValueError):
    pass


class QuotientError(ValueError):
    pass


BALL_SLACK = 1e-12
U_FLOOR = 1e-10


@dataclass
class Samples:
    """Physical node positions with values of u, v and optional error estimates."""

    points: np.ndarray
    u: np.ndarray
    v: np.ndarray
    u_err: np.ndarray | None = None
    v_err: np.ndarray | None = None
    boundary: np.ndarray | None = None

    @classmethod
    def from_grid(cls, u: GridField, v: GridField, u_ref=None, v_ref=None) -> Samples:
        """``u_ref``/``v_ref``: exact flat-chart fields, or arrays of error estimates."""
        grid = u.grid

        def err(f, ref):
            if ref is None:
                return None
            if isinstance(ref, ErrorEstimate):
                return ref.values
            return f.values - grid.node_values(ref)

        return cls(grid.physical_points, u.values, v.values, err(u, u_ref), err(v, v_ref),
                   grid.boundary_mask)

    @classmethod
    def exact(cls, u_expr, v_expr, points, boundary=None) -> Samples:
        points = np.asarray(points, dtype=float)
        n = points.shape[1]
        return cls(points, fields.numeric(u_expr, n)(points), fields.numeric(v_expr, n)(points),
                   boundary=boundary)

    def within(self, r, center=None) -> np.ndarray:
        # relative slack keeps nodes on the sphere inside after a rescaling
        c = 0.0 if center is None else np.asarray(center)
        return np.linalg.norm(self.points - c, axis=1) <= r * (1 + BALL_SLACK)


@dataclass
class ErrorEstimate:
    values: np.ndarray


def richardson_error(fine: GridField, coarse: GridField, order: int = 2) -> ErrorEstimate:
    """Node-wise error estimate of ``fine`` from a solve on the grid with N/2."""
    g = fine.grid
    shared = g.coarsen(fine.values).reshape(coarse.grid.shape)
    est = (shared - coarse.array) / (2**order - 1)
    up = est
    for axis in range(g.n):
        up = np.repeat(up, 2, axis=axis)
    up = up[tuple(slice(0, s) for s in g.shape)]
    return ErrorEstimate(up.ravel())


@dataclass
class ScaleFit:
    r: float
    P: Polynomial
    E: float
    ratio: float
    noise: float
    nodes: int
    constraint_residual: float
    annulus_holder: float | None = None

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "E_r": self.E,
            "ratio_E_r": self.ratio,
            "noise": self.noise,
            "nodes": self.nodes,
            "constraint_residual": self.constraint_residual,
            "annulus_holder": self.annulus_holder,
            "P": [[list(m), float(a)] for m, a in self.P.items()],
        }


def _basis(sys: ApproxSystem):
    zero = {m: 0 for m in sys.free}
    particular = solve_system(sys, zero).to_float()
    hom = sys.homogeneous()
    basis = []
    for m in sys.free:
        vals = dict(zero)
        vals[m] = 1
        basis.append(solve_system(hom, vals).to_float())
    return particular, basis


def fit_scale(samples: Samples, r: float, sys: ApproxSystem, min_factor: int = 10,
              _basis_cache=None) -> ScaleFit:
    """Least-squares approximating polynomial on ``Omega ∩ B_r``."""
    particular, basis = _basis_cache or _basis(sys)
    mask = samples.within(r)
    count = int(mask.sum())
    if count < min_factor * len(basis):
        raise ValueError(f"only {count} nodes in B_{r:g}; need {min_factor * len(basis)}")
    X = samples.points[mask]
    u, v = samples.u[mask], samples.v[mask]
    target = v - u * particular(X)
    design = np.column_stack([u * B(X) for B in basis])
    norms = np.linalg.norm(design, axis=0)
    if (norms == 0).any():
        raise RankDeficiencyError(f"degenerate node set in B_{r:g}")
    coef, _, rank, sv = np.linalg.lstsq(design / norms, target, rcond=None)
    if rank < len(basis) or sv[-1] < 1e-12 * sv[0]:
        raise RankDeficiencyError(f"least-squares system is rank deficient in B_{r:g}")
    coef = coef / norms
    P = particular
    for t, B in zip(coef, basis):
        P = P + float(t) * B
    resid = v - u * P(X)
    E = float(np.abs(resid).max())
    # boundary nodes carry u = 0 up to rounding; the ratio is an interior quantity
    half = samples.within(r / 2) & (samples.u > U_FLOOR * np.abs(samples.u).max())
    if samples.boundary is not None:
        half &= ~samples.boundary
    Xh = samples.points[half]
    ratio = float(np.max(np.abs(samples.v[half] - samples.u[half] * P(Xh)) / samples.u[half])) if half.any() else float("nan")
    noise = 64 * np.finfo(float).eps * float(max(np.abs(v).max(), np.abs(u * P(X)).max()))
    if samples.v_err is not None:
        grid_part = samples.v_err[mask]
        if samples.u_err is not None:
            grid_part = grid_part - samples.u_err[mask] * P(X)
        noise += float(np.abs(grid_part).max())
    return ScaleFit(r, P, E, ratio, noise, count, sys.residual(P))


def dyadic_scales(r0: float, rho: float = 0.5, count: int = 4) -> list:
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    return [r0 * rho**j for j in range(count)]


_BALL_CACHE = {}


def _unit_ball_lattice(n: int, per_axis: int = 41) -> np.ndarray:
    if (n, per_axis) not in _BALL_CACHE:
        t = np.linspace(-1, 1, per_axis)
        pts = np.stack([m.ravel() for m in np.meshgrid(*[t] * n, indexing="ij")], -1)
        _BALL_CACHE[n, per_axis] = pts[np.linalg.norm(pts, axis=1) <= 1]
    return _BALL_CACHE[n, per_axis]


def sup_on_ball(P: Polynomial, r: float) -> float:
    """Sampled ``sup_{B_r} |P|`` (lattice of the unit ball scaled by r)."""
    return float(np.abs(P(r * _unit_ball_lattice(P.dim))).max()) if P else 0.0


def spread(values) -> float:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return float("nan")
    lo = min(vals)
    return float("inf") if lo <= 0 else max(vals) / lo


@dataclass
class DecayReport:
    k: int
    alpha: float
    scales: list
    fitted_exponent: float | None
    status: str
    measured: list
    drift_coeff: list
    drift_sup: list
    ratio_constant: float | None
    ratio_spread: float
    drift_constant: float | None
    drift_spread: float
    holder: float | None = None
    holder_norm: float | None = None
    quotient_error: float | None = None
    u_at_half: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def target_exponent(self) -> float:
        return self.k + 1 + self.alpha

    @property
    def exponent_ok(self) -> bool:
        if self.status == "exact quotient":
            return True
        return self.fitted_exponent is not None and self.fitted_exponent >= self.target_exponent - EXPONENT_SLACK

    @property
    def ratio_bounded(self) -> bool:
        return self.ratio_spread <= SPREAD_LIMIT

    @property
    def drift_bounded(self) -> bool:
        return self.drift_spread <= SPREAD_LIMIT

    @property
    def violation(self) -> bool:
        return not (self.exponent_ok and self.drift_bounded)

    def to_dict(self, timestamp: bool = True) -> dict:
        out = {
            "schema": "harnack-lab/decay-report",
            "schema_version": SCHEMA_VERSION,
            "k": self.k,
            "alpha": self.alpha,
            "status": self.status,
            "fitted_exponent": self.fitted_exponent,
            "target_exponent": self.target_exponent,
            "exponent_ok": self.exponent_ok,
            "measured_scales": self.measured,
            "ratio_constant": self.ratio_constant,
            "ratio_spread": self.ratio_spread,
            "drift_constant": self.drift_constant,
            "drift_spread": self.drift_spread,
            "violation": self.violation,
            "holder_seminorm": self.holder,
            "holder_norm_proxy": self.holder_norm,
            "quotient_error": self.quotient_error,
            "u_at_half": self.u_at_half,
            "meta": self.meta,
            "scales": [s.to_dict() | {"drift_coeff": dc, "drift_sup": ds}
                       for s, dc, ds in zip(self.scales, self.drift_coeff + [None], self.drift_sup + [None])],
        }
        if timestamp:
            out["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        return out

    def to_json(self, timestamp: bool = True) -> str:
        return json.dumps(_finite(self.to_dict(timestamp)), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("r,E_r,ratio_E_r,drift_coeff,drift_sup,constraint_residual\n")
        for s, dc, ds in zip(self.scales, self.drift_coeff + [None], self.drift_sup + [None]):
            cells = [s.r, s.E, s.ratio, dc, ds, s.constraint_residual]
            buf.write(",".join("" if c is None else f"{c:.17g}" for c in cells) + "\n")
        return buf.getvalue()

    def plot_csv(self) -> str:
        lines = ["log_r,log_E_r,measured"]
        for s in self.scales:
            if s.E > 0:
                lines.append(f"{math.log(s.r):.17g},{math.log(s.E):.17g},{int(s.r in self.measured)}")
        return "\n".join(lines) + "\n"


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def decay_profile(samples: Samples, sys: ApproxSystem, scales, alpha: float = 0.5,
                  floor_factor: float = FLOOR_FACTOR, quotient: GridField | None = None,
                  quotient_exact=None, annulus: bool = False, holder_pairs: int = 10_000,
                  seed: int = 0) -> DecayReport:
    """Fit every scale, then the decay exponent, drift and ratio constants."""
    scales = [float(r) for r in scales]
    if any(b >= a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be strictly decreasing")
    k = sys.k
    cache = _basis(sys)
    fits = [fit_scale(samples, r, sys, _basis_cache=cache) for r in scales]
    if quotient is not None and annulus:
        for s in fits:
            center = np.zeros(quotient.grid.n)
            center[-1] = s.r / 2
            try:
                s.annulus_holder = holder_estimate(quotient, 1, alpha, (center, s.r / 4),
                                                   pairs=holder_pairs // 10, seed=seed)
            except ValueError:
                s.annulus_holder = None
    measured = [s.r for s in fits if s.E >= floor_factor * s.noise]
    status = "ok"
    exponent = None
    if fits[0].E < 1e-13:
        status = "exact quotient"
        measured = []
    elif len(measured) < 2:
        status = "insufficient scales above error floor"
    else:
        pts = [(math.log(s.r), math.log(s.E)) for s in fits if s.r in measured]
        exponent = float(np.polyfit(*zip(*pts), 1)[0])
    expo = k + alpha
    drift_coeff, drift_sup = [], []
    for a, b in zip(fits, fits[1:]):
        d = a.P - b.P
        drift_coeff.append(float(d.norm()))
        drift_sup.append(sup_on_ball(d, a.r))
    ratio_norm = [s.ratio / s.r**expo for s in fits if s.r in measured]
    drift_norm = [ds / a.r**expo for a, b, ds in zip(fits, fits[1:], drift_sup)
                  if a.r in measured and b.r in measured]
    report = DecayReport(
        k, alpha, fits, exponent, status, measured, drift_coeff, drift_sup,
        max(ratio_norm) if ratio_norm else None, spread(ratio_norm),
        max(drift_norm) if drift_norm else None, spread(drift_norm),
        meta={"floor_factor": floor_factor,
              "floor_cutoff": min(measured) if measured else None,
              "holder_seed": seed},
    )
    if status == "exact quotient":
        report.ratio_spread = report.drift_spread = 1.0
    if quotient is not None:
        report.holder = holder_estimate(quotient, k, alpha, pairs=holder_pairs, seed=seed)
        report.holder_norm = holder_norm_proxy(quotient, k, alpha, pairs=holder_pairs, seed=seed)
        if quotient_exact is not None:
            report.quotient_error = quotient_max_error(quotient, quotient_exact)
    return report


# -- quotient and Hoelder estimates ------------------------------------------

def quotient_field(u: GridField, v: GridField, deriv_tol: float = 1e-8) -> GridField:
    """``v/u`` off the flat face; ratio of one-sided normal differences on it."""
    grid = u.grid
    if v.grid != grid:
        raise QuotientError("u and v live on different grids")
    face = grid.flat_face_mask
    uv, vv = u.values, v.values
    if (uv[~face] <= 0).any():
        bad = int((uv[~face] <= 0).sum())
        raise QuotientError(f"u is not positive at {bad} interior nodes")
    q = np.empty_like(uv)
    q[~face] = vv[~face] / uv[~face]
    ua, va = u.array, v.array
    h = grid.h
    du = _normal_difference(ua, h)
    dv = _normal_difference(va, h)
    if (np.abs(du) < deriv_tol).any():
        raise QuotientError("normal derivative of u vanishes on the flat face")
    qa = q.reshape(grid.shape)
    qa[..., 0] = dv / du
    return GridField(grid, qa.ravel())


def _normal_difference(a, h):
    # four-point one-sided stencil; its O(h^3) error keeps the face row smooth
    # against the interior under repeated differencing
    return (-11 * a[..., 0] + 18 * a[..., 1] - 9 * a[..., 2] + 2 * a[..., 3]) / (6 * h)


def quotient_max_error(q: GridField, exact, radius: float = 0.5) -> float:
    """``max |q - exact|`` over ``Omega ∩ B_radius``; ``exact`` is a physical-chart field."""
    grid = q.grid
    mask = np.linalg.norm(grid.physical_points, axis=1) <= radius
    ref = fields.numeric(exact, grid.n)(grid.physical_points[mask])
    return float(np.abs(q.values[mask] - ref).max())


def _physical_derivatives(q: GridField, k: int) -> dict:
    """All order-k physical derivatives of q as node arrays, keyed by multi-index."""
    grid = q.grid
    n, h = grid.n, grid.h
    if grid.domain is not None and grid.domain.g != 0:
        gg = grid.domain.grad_g_numeric()(grid.points)
        gslopes = [gg[:, i].reshape(grid.shape) for i in range(n - 1)]
    else:
        gslopes = None

    def D(F, i):
        d = np.gradient(F, h, axis=i, edge_order=2)
        if i < n - 1 and gslopes is not None:
            d = d - gslopes[i] * np.gradient(F, h, axis=n - 1, edge_order=2)
        return d

    out = {}
    base = q.array
    for m in indices_up_to(n, k):
        if sum(m) != k:
            continue
        F = base
        for i, e in enumerate(m):
            for _ in range(e):
                F = D(F, i)
        out[m] = F.ravel()
    return out


def _region_mask(grid: Grid, region):
    if region is None:
        center, radius = np.zeros(grid.n), 0.5
    else:
        center, radius = region
    return np.linalg.norm(grid.physical_points - np.asarray(center, float), axis=1) <= radius


def _pairs(grid: Grid, mask, count: int, seed: int, dmin: float, dmax: float):
    idx = np.flatnonzero(mask)
    pts = grid.physical_points
    rng = np.random.default_rng(seed)
    firsts, seconds = [], []
    have = 0
    for _ in range(50):
        if have >= count:
            break
        a = rng.choice(idx, size=4 * count)
        b = rng.choice(idx, size=4 * count)
        d = np.linalg.norm(pts[a] - pts[b], axis=1)
        keep = (d >= dmin) & (d <= dmax)
        firsts.append(a[keep])
        seconds.append(b[keep])
        have += int(keep.sum())
    a = np.concatenate(firsts)[:count] if firsts else np.zeros(0, int)
    b = np.concatenate(seconds)[:count] if seconds else np.zeros(0, int)
    # axis-aligned partners at dyadic index separations
    shaped = np.arange(grid.size).reshape(grid.shape)
    step = 4
    extra_a, extra_b = [a], [b]
    while step * grid.h <= dmax + 1e-12:
        for axis in range(grid.n):
            lo = [slice(None)] * grid.n
            hi = [slice(None)] * grid.n
            lo[axis] = slice(0, -step)
            hi[axis] = slice(step, None)
            ia, ib = shaped[tuple(lo)].ravel(), shaped[tuple(hi)].ravel()
            ok = mask[ia] & mask[ib]
            ia, ib = ia[ok], ib[ok]
            d = np.linalg.norm(pts[ia] - pts[ib], axis=1)
            keep = (d >= dmin) & (d <= dmax)
            extra_a.append(ia[keep])
            extra_b.append(ib[keep])
        step *= 2
    return np.concatenate(extra_a), np.concatenate(extra_b)


def holder_estimate(q: GridField, k: int, alpha: float, region=None, pairs: int = 10_000,
                    seed: int = 0, dmax: float = 0.25) -> float:
    """Sampled ``[D^k q]_{C^alpha}`` over a region (default ``Omega ∩ B_{1/2}``).

    ``region`` is ``(center, radius)`` in the physical chart. Derivatives are
    taken in physical coordinates through the flattening chain rule.
    """
    if k not in (1, 2, 3):
        raise ValueError(f"holder_estimate supports k in {{1, 2, 3}}, got {k}")
    grid = q.grid
    mask = _region_mask(grid, region)
    derivs = _physical_derivatives(q, k)
    D = np.stack(list(derivs.values()), -1)
    a, b = _pairs(grid, mask, pairs, seed, 4 * grid.h, dmax)
    if a.size == 0:
        raise ValueError("no admissible point pairs in the region")
    dist = np.linalg.norm(grid.physical_points[a] - grid.physical_points[b], axis=1)
    jumps = np.linalg.norm(D[a] - D[b], axis=1)
    return float((jumps / dist**alpha).max())


def holder_norm_proxy(q: GridField, k: int, alpha: float, region=None, pairs: int = 10_000,
                      seed: int = 0) -> float:
    """``max_{|m| <= k} sup |D^m q|`` on the region plus the order-k seminorm."""
    mask = _region_mask(q.grid, region)
    sup = float(np.abs(q.values[mask]).max())
    for j in range(1, k + 1):
        for vals in _physical_derivatives(q, j).values():
            sup = max(sup, float(np.abs(vals[mask]).max()))
    return sup + holder_estimate(q, k, alpha, region, pairs, seed)
