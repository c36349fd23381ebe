"""Graph domains, operator coefficient data, flattening, and exact test pairs.

Two charts are in play. The physical chart x describes the graph domain
``{x_n > g(x')}``; the flat chart ``y = Phi(x) = (x', x_n - g(x'))`` sends it to
the half-space ``{y_n > 0}``. All fields are sympy expressions in the same
symbols x1..xn; the owning object records which chart they live in.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
import sympy as sp

from . import fields
from .fields import coords
from .polyalg import Polynomial


class NormalizationError(ValueError):
    pass


def _immutable(matrix):
    return sp.ImmutableMatrix(matrix)


@dataclass(frozen=True)
class OperatorData:
    """Coefficients of ``L w = Tr(A D^2 w) + b . grad w + c w`` and the data ``f``."""

    n: int
    A: sp.ImmutableMatrix
    b: tuple
    c: sp.Expr = sp.Integer(0)
    f: sp.Expr = sp.Integer(0)
    lam: float | None = None
    Lam: float | None = None
    # declared regularity budget, e.g. {"A": "C^{k-1,a}"}; informational only
    regularity: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        A = _immutable(self.A)
        if A.shape != (self.n, self.n):
            raise ValueError(f"A must be {self.n}x{self.n}")
        if A != A.T:
            raise ValueError("A must be symmetric")
        object.__setattr__(self, "A", A)
        b = tuple(sp.sympify(e) for e in self.b)
        if len(b) != self.n:
            raise ValueError(f"b must have {self.n} entries")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", sp.sympify(self.c))
        object.__setattr__(self, "f", sp.sympify(self.f))

    @classmethod
    def laplacian(cls, n: int, f=0) -> OperatorData:
        return cls(n, sp.eye(n), (0,) * n, 0, f)

    def apply(self, w):
        """Symbolic ``L w``."""
        xs = coords(self.n)
        out = self.c * w
        for i in range(self.n):
            out += self.b[i] * sp.diff(w, xs[i])
            for j in range(self.n):
                if self.A[i, j] != 0:
                    out += self.A[i, j] * sp.diff(w, xs[i], xs[j])
        return out

    def with_f(self, f) -> OperatorData:
        return replace(self, f=sp.sympify(f))

    def numeric(self):
        """Vectorized evaluators ``(A, b, c, f)``; A returns (M, n, n), b (M, n)."""
        n = self.n
        A_fn = [[fields.numeric(self.A[i, j], n) for j in range(n)] for i in range(n)]
        b_fn = [fields.numeric(e, n) for e in self.b]
        c_fn = fields.numeric(self.c, n)
        f_fn = fields.numeric(self.f, n)

        def A(points):
            return np.stack([np.stack([A_fn[i][j](points) for j in range(n)], -1) for i in range(n)], -2)

        def b(points):
            return np.stack([fn(points) for fn in b_fn], -1)

        return A, b, c_fn, f_fn

    def ellipticity(self, points) -> tuple[float, float]:
        A, _, _, _ = self.numeric()
        eig = np.linalg.eigvalsh(A(points))
        return float(eig.min()), float(eig.max())

    def with_bounds(self, points) -> OperatorData:
        lam, Lam = self.ellipticity(points)
        if lam <= 0:
            raise ValueError(f"operator is not elliptic on the sample (min eigenvalue {lam:.3g})")
        return replace(self, lam=lam, Lam=Lam)

    def at_origin(self):
        zero = {s: 0 for s in coords(self.n)}
        return self.A.subs(zero), tuple(e.subs(zero) for e in self.b)

    def rescaled(self, r0) -> OperatorData:
        """Coefficients of the problem satisfied by ``u(r0 x) / r0``."""
        r0 = fields.exact_number(r0)
        xs = coords(self.n)
        sub = {s: r0 * s for s in xs}
        return OperatorData(
            self.n,
            self.A.subs(sub, simultaneous=True),
            tuple(r0 * e.subs(sub, simultaneous=True) for e in self.b),
            r0**2 * self.c.subs(sub, simultaneous=True),
            r0 * self.f.subs(sub, simultaneous=True),
            self.lam,
            self.Lam,
            self.regularity,
        )


def _sample_box(n_minus_1: int, count: int, seed: int):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(count, max(n_minus_1, 1)))[:, :n_minus_1]


@dataclass(frozen=True)
class GraphDomain:
    """The region ``{x_n > g(x')}`` with ``g(0) = 0`` and ``grad g(0) = 0``."""

    n: int
    g: sp.Expr
    reg_order: int = 2
    holder_alpha: float = 0.5
    norm_bound: float | None = None

    def __post_init__(self):
        g = sp.sympify(self.g)
        object.__setattr__(self, "g", g)
        xs = coords(self.n)
        if xs[-1] in g.free_symbols:
            raise ValueError("g must not depend on x_n")
        zero = {s: 0 for s in xs}
        if sp.simplify(g.subs(zero)) != 0:
            raise NormalizationError("g(0) must vanish")
        for s in xs[:-1]:
            if sp.simplify(sp.diff(g, s).subs(zero)) != 0:
                raise NormalizationError("grad g(0) must vanish")
        if not 0 < self.holder_alpha <= 1:
            raise ValueError("holder_alpha must lie in (0, 1]")
        if self.norm_bound is None:
            object.__setattr__(self, "norm_bound", self.estimate_norm())

    @classmethod
    def flat(cls, n: int, **kw) -> GraphDomain:
        return cls(n, sp.Integer(0), **kw)

    @property
    def tangential(self):
        return coords(self.n)[:-1]

    def grad_g(self):
        return [sp.diff(self.g, s) for s in self.tangential]

    def lap_g(self):
        return sum(sp.diff(self.g, s, 2) for s in self.tangential)

    def g_numeric(self):
        return fields.numeric(self.g, self.n)

    def grad_g_numeric(self):
        fns = [fields.numeric(e, self.n) for e in self.grad_g()]
        return lambda pts: np.stack([fn(pts) for fn in fns], -1) if fns else np.zeros((len(pts), 0))

    def phi(self, points):
        """Flattening map ``x -> (x', x_n - g(x'))`` on an (M, n) array."""
        points = np.array(points, dtype=float, ndmin=2)
        out = points.copy()
        out[:, -1] -= self.g_numeric()(points)
        return out

    def phi_inv(self, points):
        points = np.array(points, dtype=float, ndmin=2)
        out = points.copy()
        out[:, -1] += self.g_numeric()(points)
        return out

    def to_flat(self, expr):
        """Re-express a physical-chart field in the flat chart (compose with Phi^-1)."""
        xn = coords(self.n)[-1]
        return sp.sympify(expr).subs(xn, xn + self.g)

    def to_physical(self, expr):
        """Re-express a flat-chart field in the physical chart (compose with Phi)."""
        xn = coords(self.n)[-1]
        return sp.sympify(expr).subs(xn, xn - self.g)

    def contains(self, points):
        points = np.array(points, dtype=float, ndmin=2)
        return points[:, -1] > self.g_numeric()(points)

    def estimate_norm(self, k: int | None = None, alpha: float | None = None,
                      samples: int = 400, seed: int = 0) -> float:
        """Sampled proxy for ``||g||_{C^{k,alpha}}`` on ``[-1, 1]^{n-1}``."""
        k = self.reg_order if k is None else k
        alpha = self.holder_alpha if alpha is None else alpha
        if self.g == 0:
            return 0.0
        m = self.n - 1
        pts = np.zeros((samples, self.n))
        pts[:, :m] = _sample_box(m, samples, seed)
        sup = 0.0
        top = []
        for j in range(k + 1):
            for idx in itertools.product(range(m), repeat=j):
                if list(idx) != sorted(idx):
                    continue
                expr = self.g
                for i in idx:
                    expr = sp.diff(expr, self.tangential[i])
                vals = fields.numeric(expr, self.n)(pts)
                sup = max(sup, float(np.abs(vals).max()))
                if j == k:
                    top.append(vals)
        rng = np.random.default_rng(seed + 1)
        a, b = rng.integers(0, samples, size=(2, 4 * samples))
        keep = a != b
        dist = np.linalg.norm(pts[a[keep]] - pts[b[keep]], axis=1)
        semi = 0.0
        for vals in top:
            semi = max(semi, float((np.abs(vals[a[keep]] - vals[b[keep]]) / dist**alpha).max()))
        return sup + semi


@dataclass(frozen=True)
class Flattening:
    domain: GraphDomain
    operator: OperatorData  # flat chart

    def phi(self, points):
        return self.domain.phi(points)

    def phi_inv(self, points):
        return self.domain.phi_inv(points)


def flatten(domain: GraphDomain) -> Flattening:
    """Laplacian of the graph domain expressed in the flat chart.

    For any w on the half-space, ``(L w)(Phi(x)) = Delta_x (w o Phi)(x)`` with
    ``A = J J^T``, ``J = D Phi`` and ``b = -(Delta' g) e_n``.
    """
    n = domain.n
    grad = domain.grad_g()
    J = sp.eye(n)
    for i in range(n - 1):
        J[n - 1, i] = -grad[i]
    A = sp.simplify(J * J.T)
    b = [0] * (n - 1) + [-domain.lap_g()]
    return Flattening(domain, OperatorData(n, A, tuple(b), 0, 0))


def graph_operator(domain: GraphDomain, f=0) -> OperatorData:
    """Physical-chart operator whose flat-chart form is exactly the Laplacian.

    ``A = I + e_n (x) grad'g + grad'g (x) e_n + |grad'g|^2 e_n (x) e_n`` and
    ``b = (Delta' g) e_n``; then ``L(w o Phi) = (Delta w) o Phi``.
    """
    n = domain.n
    grad = domain.grad_g()
    A = sp.eye(n)
    for i in range(n - 1):
        A[i, n - 1] = grad[i]
        A[n - 1, i] = grad[i]
    A[n - 1, n - 1] = 1 + sum(e**2 for e in grad)
    b = [0] * (n - 1) + [domain.lap_g()]
    return OperatorData(n, A, tuple(b), 0, f)


def pullback(op: OperatorData, domain: GraphDomain) -> OperatorData:
    """Express a physical-chart operator in the flat chart (chain rule)."""
    n = domain.n
    grad = domain.grad_g()
    xs = coords(n)
    J = sp.eye(n)
    for i in range(n - 1):
        J[n - 1, i] = -grad[i]
    A = J * sp.Matrix(op.A) * J.T
    b = J * sp.Matrix(op.b)
    curvature = sum(op.A[i, j] * sp.diff(domain.g, xs[i], xs[j])
                    for i in range(n - 1) for j in range(n - 1))
    b[n - 1] -= curvature
    to_flat = domain.to_flat
    return OperatorData(
        n,
        sp.Matrix(n, n, lambda i, j: sp.simplify(to_flat(A[i, j]))),
        tuple(sp.simplify(to_flat(e)) for e in b),
        to_flat(op.c),
        to_flat(op.f),
    )


@dataclass(frozen=True)
class ManufacturedPair:
    """Exact ``(u, v, f, L)`` on a graph domain, all in the physical chart."""

    name: str
    domain: GraphDomain
    op: OperatorData
    u_exact: sp.Expr
    v_exact: sp.Expr
    quotient_exact: sp.Expr
    # synthetic pairs carry a declared f that L v does not actually match
    synthetic: bool = False
    params: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def f_exact(self):
        return self.op.f

    def flattened(self):
        """Flat-chart operator and fields ``(op_y, u_y, v_y, q_y)`` for the solver."""
        d = self.domain
        return (pullback(self.op, d), d.to_flat(self.u_exact), d.to_flat(self.v_exact),
                d.to_flat(self.quotient_exact))

    def u_at_half(self) -> float:
        point = np.zeros((1, self.n))
        point[0, -1] = 0.5
        return float(fields.numeric(self.u_exact, self.n)(point)[0])

    def residuals(self, points):
        """Pointwise ``(L u, L v - f)`` from exact symbolic derivatives."""
        Lu = fields.numeric(self.op.apply(self.u_exact), self.n)(points)
        Lv = fields.numeric(self.op.apply(self.v_exact) - self.op.f, self.n)(points)
        return Lu, Lv

    def boundary_values(self, tangential_points):
        """``(u, v)`` sampled on the graph ``x_n = g(x')``."""
        pts = np.zeros((len(tangential_points), self.n))
        pts[:, :-1] = tangential_points
        pts[:, -1] = self.domain.g_numeric()(pts)
        return (fields.numeric(self.u_exact, self.n)(pts), fields.numeric(self.v_exact, self.n)(pts))

    def check(self, samples: int = 200, seed: int = 0, tol: float = 1e-8):
        """Verify the pair's hypotheses on random samples; raises AssertionError."""
        rng = np.random.default_rng(seed)
        n = self.n
        tang = rng.uniform(-0.9, 0.9, size=(samples, n - 1))
        ub, vb = self.boundary_values(tang)
        assert np.abs(ub).max() < tol and np.abs(vb).max() < tol, "u, v must vanish on the graph"
        flat = np.zeros((samples, n))
        flat[:, :-1] = tang
        flat[:, -1] = rng.uniform(0.02, 0.9, size=samples)
        pts = self.domain.phi_inv(flat)
        u = fields.numeric(self.u_exact, n)(pts)
        assert (u > 0).all(), "u must be positive inside the domain"
        if not self.synthetic:
            Lu, Lv = self.residuals(pts)
            assert np.abs(Lu).max() < tol, f"L u residual {np.abs(Lu).max():.3g}"
            assert np.abs(Lv).max() < tol, f"L v - f residual {np.abs(Lv).max():.3g}"
        return True

    def smallness(self, k: int, samples: int = 300, seed: int = 0) -> float:
        """Measured size of the normalization deviations on the unit ball.

        Max over sup-norms of ``g``, ``A - I``, ``b``, ``c``, ``f`` and
        ``u - x_n`` together with their derivatives up to the orders that the
        normalization controls. Hoelder parts are not included.
        """
        n = self.n
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(samples, n))
        pts *= (rng.uniform(size=(samples, 1)) ** (1 / n)) / np.linalg.norm(pts, axis=1, keepdims=True)
        xs = coords(n)
        budget = [(self.domain.g, k), (self.u_exact - xs[-1], k), (self.op.f, k - 1),
                  (self.op.c, max(k - 2, 0))]
        budget += [(self.op.A[i, j] - (1 if i == j else 0), k - 1) for i in range(n) for j in range(n)]
        budget += [(e, max(k - 2, 0)) for e in self.op.b]
        worst = 0.0
        for expr, top in budget:
            for j in range(top + 1):
                for idx in itertools.combinations_with_replacement(range(n), j):
                    d = expr
                    for i in idx:
                        d = sp.diff(d, xs[i])
                    if d == 0:
                        continue
                    worst = max(worst, float(np.abs(fields.numeric(d, n)(pts)).max()))
        return worst

    def rescaled(self, r0) -> ManufacturedPair:
        """Pair satisfied by ``u(r0 x)/r0``, ``v(r0 x)/r0`` on ``Omega / r0``."""
        r0e = fields.exact_number(r0)
        xs = coords(self.n)
        sub = {s: r0e * s for s in xs}
        g = sp.sympify(self.domain.g).subs(sub, simultaneous=True) / r0e
        dom = GraphDomain(self.n, g, self.domain.reg_order, self.domain.holder_alpha)
        return ManufacturedPair(
            f"{self.name}@{r0}",
            dom,
            self.op.rescaled(r0e),
            self.u_exact.subs(sub, simultaneous=True) / r0e,
            self.v_exact.subs(sub, simultaneous=True) / r0e,
            self.quotient_exact.subs(sub, simultaneous=True),
            self.synthetic,
            {**self.params, "rescaled": r0},
        )


def _as_flat_field(Q, n):
    if isinstance(Q, Polynomial):
        if Q.dim != n:
            raise ValueError(f"Q has dimension {Q.dim}, domain {n}")
        return Q.to_sympy(coords(n))
    if isinstance(Q, str):
        return fields.parse(Q, n)
    return sp.sympify(Q)


def manufactured_flattened(domain: GraphDomain, Q) -> ManufacturedPair:
    """Exact pair built from the flat chart: ``u = y_n``, ``v = y_n Q(y)``.

    The operator is :func:`graph_operator`, so ``L u = 0`` exactly and
    ``f = Delta_y(y_n Q)`` composed with Phi.
    """
    n = domain.n
    xn = coords(n)[-1]
    Qy = _as_flat_field(Q, n)
    f_y = sp.expand(fields.laplacian(xn * Qy, n))
    u = xn - domain.g
    q = domain.to_physical(Qy)
    return ManufacturedPair(
        "flattened",
        domain,
        graph_operator(domain, domain.to_physical(f_y)),
        u,
        u * q,
        q,
        params={"g": str(domain.g), "Q": str(Qy)},
    )


def conformal_boundary(eps):
    """Root near 0 of ``x2 + eps (x1^2 - x2^2) = 0`` as a closed-form g(x1)."""
    eps = fields.exact_number(eps)
    x1 = coords(2)[0]
    if eps == 0:
        return sp.Integer(0)
    return (1 - sp.sqrt(1 + 4 * eps**2 * x1**2)) / (2 * eps)


def conformal_boundary_newton(eps: float, x1, tol: float = 1e-14, max_iter: int = 50):
    """Newton iteration for the same branch, seeded at ``-eps x1^2``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = -eps * x1**2
    for _ in range(max_iter):
        F = x2 + eps * (x1**2 - x2**2)
        step = F / (1 - 2 * eps * x2)
        x2 = x2 - step
        if np.abs(step).max() < tol:
            break
    return x2


def conformal_pair_2d(eps, power: int = 2) -> ManufacturedPair:
    """Harmonic pair ``u = Im w``, ``v = Im w^power`` with ``w = z + i eps z^2``."""
    eps_e = fields.exact_number(eps)
    if not abs(eps_e) < sp.Rational(1, 4):
        raise ValueError(f"eps must satisfy |eps| < 1/4, got {eps}")
    if int(power) != power or power < 2:
        raise ValueError(f"power must be an integer >= 2, got {power}")
    x1, x2 = coords(2)
    re_w = x1 - 2 * eps_e * x1 * x2
    im_w = x2 + eps_e * (x1**2 - x2**2)
    w = re_w + sp.I * im_w
    v = sp.expand(sp.im(sp.expand(w**power)))
    wb = re_w - sp.I * im_w
    # Im(w^p)/Im(w) = sum_j w^j conj(w)^(p-1-j)
    q = sp.expand(sum(w**j * wb ** (power - 1 - j) for j in range(power)))
    q = sp.expand(sp.re(q))
    dom = GraphDomain(2, conformal_boundary(eps_e), reg_order=3)
    return ManufacturedPair(
        "conformal",
        dom,
        OperatorData.laplacian(2),
        sp.expand(im_w),
        v,
        q,
        params={"eps": str(eps_e), "power": int(power)},
    )


def synthetic_pair(quotient, n: int = 2, g=0) -> ManufacturedPair:
    """``u = x_n - g``, ``v = u q`` for an arbitrary (possibly non-smooth) quotient.

    The declared right-hand side is 0; this pair only serves as a negative
    control for the measurement engine, so ``L v = f`` is not enforced.
    """
    dom = GraphDomain(n, g)
    q = fields.parse(quotient, n) if isinstance(quotient, str) else sp.sympify(quotient)
    u = coords(n)[-1] - dom.g
    return ManufacturedPair("synthetic", dom, graph_operator(dom), u, u * q, q,
                            synthetic=True, params={"quotient": str(q)})
