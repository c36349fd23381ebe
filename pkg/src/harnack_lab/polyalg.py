"""Sparse multi-index polynomials in n variables.

Coefficients are either ``fractions.Fraction`` (exact mode) or ``float``.
Polynomials are immutable; every operation returns a new object.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction
from numbers import Number, Rational

import numpy as np

MAX_DIM = 8
DEFAULT_MAX_DEGREE = 14


class DegreeOverflowError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class TaylorError(ValueError):
    """Raised when a field cannot provide the requested derivatives at 0."""


MultiIndex = tuple


def multi_index(entries) -> MultiIndex:
    m = tuple(int(e) for e in entries)
    if any(e < 0 for e in m):
        raise ValueError(f"negative entry in multi-index {m}")
    return m


def order(m: MultiIndex) -> int:
    return sum(m)


def unit(n: int, i: int) -> MultiIndex:
    """The unit multi-index with 1 in position ``i`` (0-based)."""
    return tuple(1 if j == i else 0 for j in range(n))


def shift(m: MultiIndex, delta: MultiIndex):
    """Entrywise ``m + delta``, or None when any entry would go negative."""
    out = tuple(a + b for a, b in zip(m, delta))
    if any(e < 0 for e in out):
        return None
    return out


def indices_up_to(n: int, degree: int):
    """All multi-indices of dimension n with order <= degree, graded lex order."""
    out = []
    for d in range(degree + 1):
        level = [m for m in itertools.product(range(d + 1), repeat=n) if sum(m) == d]
        out.extend(sorted(level, reverse=True))
    return out


def factorial(m: MultiIndex) -> int:
    return math.prod(math.factorial(e) for e in m)


def _clean(value):
    if isinstance(value, Fraction):
        return value
    if isinstance(value, Rational):
        return Fraction(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    if isinstance(value, (int, np.integer)):
        return Fraction(int(value))
    if isinstance(value, Number):
        return float(value)
    raise TypeError(f"unsupported coefficient type {type(value).__name__}")


class Polynomial:
    """Polynomial ``sum a_m x^m`` stored as a sparse map from multi-index to coefficient."""

    __slots__ = ("_dim", "_coeffs")

    def __init__(self, dim: int, coeffs=None):
        if not 1 <= dim <= MAX_DIM:
            raise ValueError(f"dimension must be in [1, {MAX_DIM}], got {dim}")
        clean = {}
        for m, a in (coeffs or {}).items():
            m = multi_index(m)
            if len(m) != dim:
                raise DimensionMismatchError(f"index {m} does not have length {dim}")
            a = _clean(a)
            if a != 0:
                clean[m] = clean.get(m, 0) + a
        self._dim = dim
        self._coeffs = {m: a for m, a in clean.items() if a != 0}

    @classmethod
    def zero(cls, dim: int) -> Polynomial:
        return cls(dim)

    @classmethod
    def constant(cls, dim: int, value) -> Polynomial:
        return cls(dim, {(0,) * dim: value})

    @classmethod
    def monomial(cls, m, coeff=1) -> Polynomial:
        m = multi_index(m)
        return cls(len(m), {m: coeff})

    @classmethod
    def variable(cls, dim: int, i: int) -> Polynomial:
        """The coordinate polynomial ``x_{i+1}`` (``i`` is 0-based)."""
        return cls(dim, {unit(dim, i): 1})

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def coeffs(self) -> dict:
        return dict(self._coeffs)

    @property
    def degree(self) -> int:
        """Largest order of a nonzero coefficient; -1 for the zero polynomial."""
        return max((sum(m) for m in self._coeffs), default=-1)

    @property
    def is_exact(self) -> bool:
        return all(isinstance(a, Fraction) for a in self._coeffs.values())

    def __getitem__(self, m):
        return self._coeffs.get(tuple(m), 0)

    def items(self):
        return sorted(self._coeffs.items(), key=lambda t: (sum(t[0]), tuple(-e for e in t[0])))

    def norm(self):
        """Coefficient norm ``max |a_m|``."""
        return max((abs(a) for a in self._coeffs.values()), default=0)

    def __bool__(self):
        return bool(self._coeffs)

    def __eq__(self, other):
        if isinstance(other, Number):
            other = Polynomial.constant(self._dim, other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._dim == other._dim and self._coeffs == other._coeffs

    def __hash__(self):
        return hash((self._dim, frozenset(self._coeffs.items())))

    def __repr__(self):
        if not self._coeffs:
            return f"Polynomial({self._dim}, 0)"
        return f"Polynomial({self._dim}, {self.to_string()})"

    def to_string(self) -> str:
        terms = []
        for m, a in self.items():
            mono = "*".join(f"x{i + 1}" + (f"^{e}" if e > 1 else "") for i, e in enumerate(m) if e)
            terms.append(f"{a}" + (f"*{mono}" if mono else ""))
        return " + ".join(terms) if terms else "0"

    def _check(self, other):
        if other._dim != self._dim:
            raise DimensionMismatchError(f"dimensions differ: {self._dim} vs {other._dim}")

    def _coerce(self, other):
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, Number):
            return Polynomial.constant(self._dim, other)
        return None

    def __add__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        out = dict(self._coeffs)
        for m, a in other._coeffs.items():
            out[m] = out.get(m, 0) + a
        return Polynomial(self._dim, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self._dim, {m: -a for m, a in self._coeffs.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Polynomial):
            return multiply(self, other)
        if isinstance(other, Number):
            other = _clean(other)
            return Polynomial(self._dim, {m: a * other for m, a in self._coeffs.items()})
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Number):
            return NotImplemented
        other = _clean(other)
        return Polynomial(self._dim, {m: a / other for m, a in self._coeffs.items()})

    def __call__(self, x):
        return evaluate(self, x)

    def truncate(self, degree: int) -> Polynomial:
        return Polynomial(self._dim, {m: a for m, a in self._coeffs.items() if sum(m) <= degree})

    def homogeneous_part(self, degree: int) -> Polynomial:
        return Polynomial(self._dim, {m: a for m, a in self._coeffs.items() if sum(m) == degree})

    def to_float(self) -> Polynomial:
        return Polynomial(self._dim, {m: float(a) for m, a in self._coeffs.items()})

    def to_exact(self, max_denominator: int | None = None) -> Polynomial:
        out = {}
        for m, a in self._coeffs.items():
            a = Fraction(a)
            out[m] = a.limit_denominator(max_denominator) if max_denominator else a
        return Polynomial(self._dim, out)

    def to_sympy(self, symbols):
        import sympy as sp

        expr = sp.Integer(0)
        for m, a in self._coeffs.items():
            c = sp.Rational(a.numerator, a.denominator) if isinstance(a, Fraction) else sp.Float(a)
            expr += c * sp.Mul(*[s**e for s, e in zip(symbols, m)])
        return expr


def evaluate(P: Polynomial, x):
    """Evaluate P at a point (length-n sequence) or at an (M, n) array of points."""
    if isinstance(x, np.ndarray) and x.ndim == 2:
        if x.shape[1] != P.dim:
            raise DimensionMismatchError(f"points have dimension {x.shape[1]}, polynomial {P.dim}")
        out = np.zeros(x.shape[0])
        if not P._coeffs:
            return out
        top = P.degree
        powers = [np.vander(x[:, i], top + 1, increasing=True) for i in range(P.dim)]
        for m, a in P._coeffs.items():
            term = np.full(x.shape[0], float(a))
            for i, e in enumerate(m):
                if e:
                    term = term * powers[i][:, e]
            out += term
        return out
    x = tuple(x)
    if len(x) != P.dim:
        raise DimensionMismatchError(f"point has dimension {len(x)}, polynomial {P.dim}")
    total = 0
    for m, a in P._coeffs.items():
        total += a * math.prod(xi**e for xi, e in zip(x, m))
    return total


def derive(P: Polynomial, i: int) -> Polynomial:
    """Partial derivative with respect to the 0-based axis ``i``."""
    if not 0 <= i < P.dim:
        raise ValueError(f"axis {i} out of range for dimension {P.dim}")
    out = {}
    for m, a in P._coeffs.items():
        if m[i]:
            mm = list(m)
            mm[i] -= 1
            out[tuple(mm)] = a * m[i]
    return Polynomial(P.dim, out)


def derive_multi(P: Polynomial, m: MultiIndex) -> Polynomial:
    for i, e in enumerate(m):
        for _ in range(e):
            P = derive(P, i)
    return P


def laplacian(P: Polynomial) -> Polynomial:
    out = Polynomial.zero(P.dim)
    for i in range(P.dim):
        out = out + derive(derive(P, i), i)
    return out


def multiply(P: Polynomial, Q: Polynomial, max_degree: int | None = DEFAULT_MAX_DEGREE,
             truncate: int | None = None) -> Polynomial:
    """Product of two polynomials.

    With ``truncate`` set, terms above that order are discarded instead of
    counted against ``max_degree``.
    """
    P._check(Q)
    out = {}
    for m1, a1 in P._coeffs.items():
        d1 = sum(m1)
        for m2, a2 in Q._coeffs.items():
            if truncate is not None and d1 + sum(m2) > truncate:
                continue
            m = tuple(p + q for p, q in zip(m1, m2))
            out[m] = out.get(m, 0) + a1 * a2
    result = Polynomial(P.dim, out)
    if truncate is None and max_degree is not None and result.degree > max_degree:
        raise DegreeOverflowError(f"product degree {result.degree} exceeds cap {max_degree}")
    return result


def rescale(P: Polynomial, r) -> Polynomial:
    """Return ``x -> P(x / r)``."""
    if not r > 0:
        raise ValueError(f"scale must be positive, got {r}")
    r = _clean(r)
    return Polynomial(P.dim, {m: a / r ** sum(m) for m, a in P._coeffs.items()})


def taylor_coefficients(F, order: int, n: int | None = None) -> Polynomial:
    """Taylor polynomial of ``F`` at 0 up to total degree ``order``.

    ``F`` is either a Polynomial (truncated) or a sympy expression in the
    symbols returned by :func:`harnack_lab.fields.coords`. Rational derivative
    values stay exact; anything else becomes a float.
    """
    if isinstance(F, Polynomial):
        return F.truncate(order)
    if isinstance(F, Number):
        if n is None:
            raise TaylorError("dimension required for a constant field")
        return Polynomial.constant(n, F).truncate(order)
    try:
        import sympy as sp
    except ImportError:  # pragma: no cover
        raise TaylorError("sympy required for symbolic fields")
    if not isinstance(F, sp.Basic):
        raise TaylorError(f"field of type {type(F).__name__} does not expose derivatives")
    from .fields import coords, dimension_of

    n = n if n is not None else dimension_of(F)
    xs = coords(n)
    zero = {s: 0 for s in xs}
    cache = {(0,) * n: sp.sympify(F)}
    out = {}
    for m in indices_up_to(n, order):
        if m not in cache:
            i = next(j for j, e in enumerate(m) if e)
            parent = list(m)
            parent[i] -= 1
            cache[m] = sp.diff(cache[tuple(parent)], xs[i])
        val = cache[m].subs(zero)
        if val.has(sp.zoo, sp.nan, sp.oo, -sp.oo) or val.free_symbols:
            raise TaylorError(f"derivative {m} of field is not defined at 0")
        if not (val.is_Rational or val.is_Float):
            val = sp.simplify(val)
        if val.is_Rational:
            coef = Fraction(int(val.p), int(val.q)) / factorial(m)
        else:
            try:
                coef = float(val) / factorial(m)
            except TypeError as exc:
                raise TaylorError(f"derivative {m} did not evaluate to a number: {val}") from exc
            if not math.isfinite(coef):
                raise TaylorError(f"derivative {m} of field is not finite at 0")
        if coef != 0:
            out[m] = coef
    return Polynomial(n, out)


# -- text round-trip ----------------------------------------------------------

def dumps(P: Polynomial) -> str:
    lines = [f"# dim {P.dim}"]
    for m, a in P.items():
        if isinstance(a, Fraction):
            val = str(a.numerator) if a.denominator == 1 else f"{a.numerator}/{a.denominator}"
        else:
            val = repr(float(a))
        lines.append(" ".join(str(e) for e in m) + " : " + val)
    return "\n".join(lines) + "\n"


def _parse_scalar(text: str):
    text = text.strip()
    if any(c in text.lower() for c in ".en") and "/" not in text:
        return float(text)
    return Fraction(text)


def loads(text: str, dim: int | None = None) -> Polynomial:
    coeffs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "dim":
                dim = int(parts[1])
            continue
        if ":" not in line:
            raise ValueError(f"line {lineno}: expected 'm_1 ... m_n : coefficient'")
        idx, val = line.split(":", 1)
        m = multi_index(idx.split())
        if dim is None:
            dim = len(m)
        if len(m) != dim:
            raise ValueError(f"line {lineno}: index {m} has wrong length (dim {dim})")
        try:
            coeffs[m] = coeffs.get(m, 0) + _parse_scalar(val)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad coefficient {val.strip()!r}") from exc
    if dim is None:
        raise ValueError("cannot infer dimension of an empty polynomial")
    return Polynomial(dim, coeffs)
