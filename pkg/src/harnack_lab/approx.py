"""Approximating polynomials for v/u.

A degree-k polynomial ``P = a_m x^m`` is approximating when the Taylor part of
``L(uP)`` of order k-1 matches that of ``f``. Writing the order-l coefficient
of ``L(uP)`` as ``d_l`` gives the triangular system

    d_l = (l_n+1)(l_n+2) a_{l+e_n} + sum_{i != n} (l_i+1)(l_i+2) a_{l+2e_i-e_n} + c_l^m a_m

in which the coefficients with ``m_n = 0`` are free and all others are
determined by a sweep in increasing ``(|m|, m_n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import sympy as sp

from . import fields
from .domain import NormalizationError, OperatorData
from .polyalg import (Polynomial, derive, indices_up_to, multiply, shift,
                      taylor_coefficients, unit)


class SparsityError(ValueError):
    """Couplings that would break the triangular solve order."""


class MissingFreeValueError(KeyError):
    pass


def _fmt(c) -> str:
    if isinstance(c, Fraction):
        return str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"
    return f"{float(c):.12g}"


def _idx(m) -> str:
    return "(" + ",".join(str(e) for e in m) + ")"


def solve_key(m):
    """Sort key of the triangular sweep: ascending order, then ascending m_n."""
    return (sum(m), m[-1])


def flat_principal(m, k: int) -> Polynomial:
    """Flat-case ``L(x_n x^m)`` truncated to degree k-1."""
    n = len(m)
    out = {}
    mn = m[-1]
    if mn >= 1:
        out[shift(m, tuple(-e for e in unit(n, n - 1)))] = Fraction(mn * (mn + 1))
    for i in range(n - 1):
        if m[i] >= 2:
            target = list(m)
            target[i] -= 2
            target[-1] += 1
            t = tuple(target)
            out[t] = out.get(t, 0) + Fraction(m[i] * (m[i] - 1))
    return Polynomial(n, out).truncate(k - 1)


@dataclass(frozen=True)
class ExpansionResult:
    m: tuple
    principal: Polynomial
    couplings: dict
    remainder_bound: float = float("nan")

    @property
    def total(self) -> Polynomial:
        n = self.principal.dim
        extra = Polynomial(n, {l: c for (l, _), c in self.couplings.items()})
        return self.principal + extra


class OperatorJet:
    """Taylor data of ``(A, b, u)`` at 0 needed to expand ``L(u x^m)``.

    Checks the normalization ``u(0) = 0``, ``grad u(0) = e_n``, ``A(0) = I``.
    """

    def __init__(self, op: OperatorData, u_taylor: Polynomial, k: int, u_field=None,
                 samples: int = 0, seed: int = 0, tol: float = 1e-12):
        n = op.n
        if u_taylor.dim != n:
            raise ValueError("u_taylor dimension does not match the operator")
        self.n, self.k = n, k
        self.u = u_taylor.truncate(k)
        if abs(self.u[(0,) * n]) > tol:
            raise NormalizationError("u(0) must vanish")
        for i in range(n):
            expected = 1 if i == n - 1 else 0
            if abs(self.u[unit(n, i)] - expected) > tol:
                raise NormalizationError("grad u(0) must equal e_n")
        top = max(k - 1, 0)
        self.A = [[taylor_coefficients(op.A[i, j], top, n) for j in range(n)] for i in range(n)]
        for i in range(n):
            for j in range(n):
                if abs(self.A[i][j][(0,) * n] - (1 if i == j else 0)) > tol:
                    raise NormalizationError("A(0) must equal the identity")
        self.b = [taylor_coefficients(e, top, n) for e in op.b]
        self.grad_u = [derive(self.u, i).truncate(top) for i in range(n)]
        self._numeric = None
        if samples:
            rng = np.random.default_rng(seed)
            pts = rng.normal(size=(samples, n))
            pts *= (rng.uniform(size=(samples, 1)) ** (1 / n)) / np.linalg.norm(pts, axis=1, keepdims=True)
            A_fn, b_fn, _, _ = op.numeric()
            if u_field is None:
                u_vals = self.u(pts)
                gu = np.stack([derive(self.u, i)(pts) for i in range(n)], -1)
            else:
                u_vals = fields.numeric(u_field, n)(pts)
                gu = np.stack([fields.numeric(e, n)(pts) for e in fields.gradient(u_field, n)], -1)
            self._numeric = (pts, A_fn(pts), b_fn(pts), u_vals, gu)

    def expand(self, m) -> ExpansionResult:
        n, k = self.n, self.k
        top = k - 1
        mono = Polynomial.monomial(m)
        total = Polynomial.zero(n)
        if top >= 0:
            grads = [derive(mono, j) for j in range(n)]
            for i in range(n):
                for j in range(n):
                    if not self.A[i][j] or not grads[j]:
                        continue
                    total += 2 * multiply(multiply(self.grad_u[i], self.A[i][j], truncate=top),
                                          grads[j], truncate=top)
            for i in range(n):
                for j in range(n):
                    dij = derive(grads[j], i)
                    if not self.A[i][j] or not dij:
                        continue
                    total += multiply(multiply(self.u, self.A[i][j], truncate=top), dij, truncate=top)
            for i in range(n):
                if self.b[i] and grads[i]:
                    total += multiply(multiply(self.u, self.b[i], truncate=top), grads[i], truncate=top)
        principal = flat_principal(m, k)
        diff = total - principal
        couplings = {(l, tuple(m)): c for l, c in diff.coeffs.items()}
        bound = float("nan")
        if self._numeric is not None:
            bound = self._remainder(m, total)
        return ExpansionResult(tuple(m), principal, couplings, bound)

    def _remainder(self, m, truncated: Polynomial) -> float:
        pts, A, b, u, gu = self._numeric
        n = self.n
        mono = Polynomial.monomial(m)
        grads = np.stack([derive(mono, j)(pts) for j in range(n)], -1)
        hess = np.stack([np.stack([derive(derive(mono, j), i)(pts) for j in range(n)], -1)
                         for i in range(n)], -2)
        full = (2 * np.einsum("pi,pij,pj->p", gu, A, grads)
                + u * np.einsum("pij,pij->p", A, hess)
                + u * np.einsum("pi,pi->p", b, grads))
        return float(np.abs(full - truncated(pts)).max())


def expand_L_u_xm(op: OperatorData, u_taylor: Polynomial, m, k: int, u_field=None,
                  samples: int = 0) -> ExpansionResult:
    """Degree-(k-1) Taylor part of ``L(u x^m)`` split into flat part and couplings.

    The ``(L u) x^m`` term is dropped since ``L u = 0``.
    """
    return OperatorJet(op, u_taylor, k, u_field, samples).expand(tuple(m))


@dataclass(frozen=True)
class ApproxSystem:
    k: int
    n: int
    couplings: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    remainder_bounds: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        rows = indices_up_to(self.n, self.k - 1)
        targets = {l: self.targets.get(l, Fraction(0)) for l in rows}
        extra = set(self.targets) - set(rows)
        if extra:
            raise ValueError(f"targets outside |l| <= k-1: {sorted(extra)}")
        object.__setattr__(self, "targets", targets)
        couplings = {(tuple(l), tuple(m)): c for (l, m), c in self.couplings.items() if c != 0}
        object.__setattr__(self, "couplings", couplings)
        check_sparsity(couplings, self.k, self.n)

    @property
    def rows(self) -> list:
        """Equation indices l, ordered like the unknowns they determine."""
        return sorted(self.targets, key=lambda l: solve_key(self.pivot(l)))

    @property
    def determined(self) -> list:
        return [self.pivot(l) for l in self.rows]

    @property
    def free(self) -> list:
        return [m for m in indices_up_to(self.n, self.k) if m[-1] == 0]

    def pivot(self, l):
        return shift(l, unit(self.n, self.n - 1))

    def equation(self, l) -> list:
        """Terms ``(coefficient, m)`` of the equation indexed by l."""
        n = self.n
        terms = [(Fraction((l[-1] + 1) * (l[-1] + 2)), self.pivot(l))]
        for i in range(n - 1):
            delta = [0] * n
            delta[i] = 2
            delta[-1] = -1
            m = shift(l, tuple(delta))
            if m is not None:
                terms.append((Fraction((l[i] + 1) * (l[i] + 2)), m))
        for (ll, m), c in sorted(self.couplings.items(), key=lambda t: solve_key(t[0][1]) + t[0][1]):
            if ll == l:
                terms.append((c, m))
        return terms

    def assemble(self, P: Polynomial) -> dict:
        """The coefficients ``d_l`` of ``L(uP)`` implied by the system."""
        return {l: sum((c * P[m] for c, m in self.equation(l)), Fraction(0)) for l in self.targets}

    def residual(self, P: Polynomial) -> float:
        d = self.assemble(P)
        return max((abs(float(d[l] - self.targets[l])) for l in d), default=0.0)

    def homogeneous(self) -> ApproxSystem:
        return ApproxSystem(self.k, self.n, self.couplings, {})

    def to_float(self) -> ApproxSystem:
        return ApproxSystem(self.k, self.n, {key: float(c) for key, c in self.couplings.items()},
                            {l: float(d) for l, d in self.targets.items()}, self.remainder_bounds)

    def format(self, show_targets: bool = False) -> str:
        lines = []
        for l in self.rows:
            parts = []
            for c, m in self.equation(l):
                s = _fmt(abs(c) if parts else c)
                term = f"{s}·a_{_idx(m)}"
                if not parts:
                    parts.append(term)
                else:
                    parts.append((" - " if c < 0 else " + ") + term)
            line = "".join(parts) + f" = d_{_idx(l)}"
            if show_targets:
                line += f"    [d_{_idx(l)} = {_fmt(self.targets[l])}]"
            lines.append(line)
        return "\n".join(lines) + "\n"


def check_sparsity(couplings: dict, k: int, n: int) -> None:
    """Each coupling c_l^m must reference a free unknown or one solved before ``l + e_n``."""
    for (l, m), c in couplings.items():
        if len(l) != n or len(m) != n:
            raise SparsityError(f"coupling {(l, m)} has wrong dimension")
        if sum(l) > k - 1 or sum(m) > k:
            raise SparsityError(f"coupling c_{_idx(l)}^{_idx(m)} outside the degree range")
        if m[-1] == 0:
            continue
        if sum(m) < sum(l) + 1 or (sum(m) == sum(l) + 1 and m[-1] < l[-1] + 1):
            continue
        raise SparsityError(f"coupling c_{_idx(l)}^{_idx(m)} references an unknown solved later")


def build_system(op: OperatorData, u_taylor: Polynomial, f=None, k: int = 1, u_field=None,
                 samples: int = 0) -> ApproxSystem:
    """Assemble couplings from every ``|m| <= k`` and targets from the Taylor data of f."""
    f = op.f if f is None else f
    jet = OperatorJet(op, u_taylor, k, u_field, samples)
    couplings, bounds = {}, {}
    for m in indices_up_to(op.n, k):
        res = jet.expand(m)
        couplings.update(res.couplings)
        bounds[m] = res.remainder_bound
    f_taylor = taylor_coefficients(sp.sympify(f) if not isinstance(f, Polynomial) else f, k - 1, op.n)
    return ApproxSystem(k, op.n, couplings, f_taylor.coeffs, bounds)


def flat_system(k: int, n: int, f_taylor: Polynomial | None = None) -> ApproxSystem:
    """System of the normalized flat case ``A = I``, ``u = x_n``, ``b = c = 0``."""
    targets = f_taylor.truncate(k - 1).coeffs if f_taylor is not None else {}
    return ApproxSystem(k, n, {}, targets)


def _free_map(sys: ApproxSystem, free_values) -> dict:
    if isinstance(free_values, Polynomial):
        return {m: free_values[m] for m in sys.free}
    values = {tuple(m): v for m, v in free_values.items()}
    unknown = [m for m in values if m not in set(sys.free)]
    if unknown:
        raise ValueError(f"not free coefficients: {unknown}")
    missing = [m for m in sys.free if m not in values]
    if missing:
        raise MissingFreeValueError(f"missing free values for {missing}")
    return values


def solve_system(sys: ApproxSystem, free_values, order=None) -> Polynomial:
    """Triangular sweep for the determined coefficients given the free ones.

    ``order`` may override the sweep order of the rows; it must respect the
    dependency structure or an AssertionError is raised.
    """
    a = dict(_free_map(sys, free_values))
    rows = sys.rows if order is None else [tuple(l) for l in order]
    if sorted(rows) != sorted(sys.targets):
        raise ValueError("order must be a permutation of the equation indices")
    for l in rows:
        terms = sys.equation(l)
        (diag, pivot), rest = terms[0], terms[1:]
        acc = sys.targets[l]
        for c, m in rest:
            assert m in a, f"cyclic dependency: a_{_idx(m)} needed before it is solved"
            acc = acc - c * a[m]
        a[pivot] = acc / diag
    return Polynomial(sys.n, a)


def scale_couplings(couplings: dict, r) -> dict:
    """Couplings of the problem rescaled to unit size: ``r^{|l|+1-|m|} c_l^m``."""
    return {(l, m): c * r ** (sum(l) + 1 - sum(m)) for (l, m), c in couplings.items()}


def correct_polynomial(Q: Polynomial, scaled_couplings: dict, free_anchor: Polynomial | None = None,
                       k: int | None = None) -> Polynomial:
    """Nearby polynomial solving the perturbed homogeneous system.

    The free coefficients are pinned to those of ``free_anchor`` (default Q),
    so the map is deterministic.
    """
    k = max(Q.degree, 1) if k is None else k
    sys = ApproxSystem(k, Q.dim, scaled_couplings, {})
    anchor = Q if free_anchor is None else free_anchor
    return solve_system(sys, anchor)
