"""Closed-form smooth fields as sympy expressions in the coordinates x1..xn.

Every field in the lab is a sympy expression over the symbols returned by
:func:`coords`. Flattened (y) coordinates reuse the same symbols; which chart
an expression lives in is tracked by the caller.
"""
from __future__ import annotations

import re
from functools import lru_cache

import numpy as np
import sympy as sp


@lru_cache(maxsize=None)
def coords(n: int) -> tuple:
    return tuple(sp.Symbol(f"x{i + 1}", real=True) for i in range(n))


def dimension_of(expr) -> int:
    """Smallest n such that expr only involves x1..xn (at least 1)."""
    top = 0
    for s in sp.sympify(expr).free_symbols:
        match = re.fullmatch(r"x(\d+)", s.name)
        if not match:
            raise ValueError(f"unexpected symbol {s} in field")
        top = max(top, int(match.group(1)))
    return max(top, 1)


def parse(text: str, n: int):
    """Parse a field expression; ``y1..yn`` are accepted as aliases of ``x1..xn``."""
    xs = coords(n)
    names = {f"x{i + 1}": s for i, s in enumerate(xs)}
    names.update({f"y{i + 1}": s for i, s in enumerate(xs)})
    expr = sp.sympify(text, locals=names, rational=True)
    stray = expr.free_symbols - set(xs)
    if stray:
        raise ValueError(f"unknown symbols {sorted(map(str, stray))} in {text!r}")
    return expr


def exact_number(value):
    """Turn a config number into an exact sympy Rational (0.1 -> 1/10)."""
    if isinstance(value, sp.Basic):
        return value
    return sp.Rational(str(value))


def numeric(expr, n: int):
    """Vectorized numpy evaluator: callable mapping an (M, n) array to shape (M,)."""
    xs = coords(n)
    expr = sp.sympify(expr)
    fn = sp.lambdify(xs, expr, modules="numpy")

    def evaluate(points):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        out = fn(*[points[:, i] for i in range(n)])
        return np.broadcast_to(np.asarray(out, dtype=float), (points.shape[0],)).copy()

    return evaluate


def substitute(expr, mapping: dict):
    return sp.sympify(expr).subs(mapping, simultaneous=True)


def gradient(expr, n: int):
    return [sp.diff(expr, s) for s in coords(n)]


def hessian(expr, n: int):
    xs = coords(n)
    return sp.Matrix(n, n, lambda i, j: sp.diff(expr, xs[i], xs[j]))


def laplacian(expr, n: int):
    return sum(sp.diff(expr, s, 2) for s in coords(n))
