"""Finite differences for ``Tr(A D^2 w) + b . grad w + c w = f`` on the flat slab.

The slab is ``[-1, 1]^{n-1} x [0, 1]`` with spacing ``h = 1/N``. Face
``y_n = 0`` is the flattened boundary; the remaining faces carry Dirichlet
data from exact fields.
"""
from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from . import fields
from .domain import GraphDomain, OperatorData


class SolverError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class DiscretizationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Grid:
    n: int
    N: int
    domain: GraphDomain | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ValueError("grids support n = 2 or 3")
        if self.N < 2:
            raise ValueError("N must be at least 2")

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def shape(self) -> tuple:
        return (2 * self.N + 1,) * (self.n - 1) + (self.N + 1,)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @cached_property
    def axes(self) -> list:
        tang = np.linspace(-1.0, 1.0, 2 * self.N + 1)
        return [tang] * (self.n - 1) + [np.linspace(0.0, 1.0, self.N + 1)]

    @cached_property
    def points(self) -> np.ndarray:
        """Flat-chart node coordinates, shape (size, n), C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], -1)

    @cached_property
    def physical_points(self) -> np.ndarray:
        if self.domain is None:
            return self.points
        return self.domain.phi_inv(self.points)

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        idx = np.indices(self.shape)
        mask = np.zeros(self.shape, dtype=bool)
        for axis, size in enumerate(self.shape):
            mask |= (idx[axis] == 0) | (idx[axis] == size - 1)
        return mask.ravel()

    @cached_property
    def flat_face_mask(self) -> np.ndarray:
        return (np.indices(self.shape)[-1] == 0).ravel()

    def coarsen(self, values: np.ndarray) -> np.ndarray:
        """Restrict node values of this grid to the grid with N/2."""
        if self.N % 2:
            raise ValueError("N must be even to coarsen")
        v = np.asarray(values).reshape(self.shape)
        return v[(slice(None, None, 2),) * self.n].ravel()

    def node_values(self, F, physical: bool = False) -> np.ndarray:
        pts = self.physical_points if physical else self.points
        if isinstance(F, np.ndarray):
            if F.size != self.size:
                raise ValueError("array does not match the grid size")
            return F.ravel().astype(float)
        if callable(F) and not hasattr(F, "free_symbols"):
            return np.asarray(F(pts), dtype=float)
        return fields.numeric(F, self.n)(pts)


@dataclass(frozen=True)
class GridField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != self.grid.size:
            raise ValueError("values do not match the grid")
        if not np.isfinite(v).all():
            raise ValueError("grid field contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def to_bytes(self) -> bytes:
        g = self.grid
        head = struct.pack("<i", g.n) + struct.pack(f"<{g.n}i", *g.shape) + struct.pack("<id", g.N, g.h)
        return head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, domain: GraphDomain | None = None) -> GridField:
        (n,) = struct.unpack_from("<i", data, 0)
        off = 4
        shape = struct.unpack_from(f"<{n}i", data, off)
        off += 4 * n
        N, h = struct.unpack_from("<id", data, off)
        off += 12
        grid = Grid(n, N, domain)
        if tuple(shape) != grid.shape or not math.isclose(h, grid.h):
            raise ValueError("header is inconsistent with a slab grid")
        values = np.frombuffer(data, dtype="<f8", offset=off)
        return cls(grid, values.copy())

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, domain: GraphDomain | None = None) -> GridField:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), domain)

    def to_csv(self) -> str:
        g = self.grid
        buf = io.StringIO()
        cols = [f"y{i + 1}" for i in range(g.n)] + [f"x{i + 1}" for i in range(g.n)] + ["value"]
        buf.write(",".join(cols) + "\n")
        table = np.column_stack([g.points, g.physical_points, self.values])
        np.savetxt(buf, table, delimiter=",", fmt="%.17g")
        return buf.getvalue()


@dataclass
class LinearSystem:
    """Rows are scaled: interior rows hold ``h^2`` times the stencil."""

    matrix: sps.csr_matrix
    rhs: np.ndarray
    grid: Grid


def discretize(op: OperatorData, grid: Grid, f, bdry, one_sided_b: bool = False) -> LinearSystem:
    """Assemble the second-order stencil; Dirichlet rows are identities.

    ``op``, ``f`` and ``bdry`` are flat-chart fields. ``one_sided_b`` swaps the
    centered first differences for forward ones (first order; a control).
    """
    if op.n != grid.n:
        raise ValueError("operator and grid dimensions differ")
    n, h = grid.n, grid.h
    pts = grid.points
    A_fn, b_fn, c_fn, _ = op.numeric()
    interior = np.flatnonzero(~grid.boundary_mask)
    P = pts[interior]
    A = A_fn(P)
    b = b_fn(P)
    c = c_fn(P)
    if not (np.isfinite(A).all() and np.isfinite(b).all() and np.isfinite(c).all()):
        raise ValueError("operator coefficients are not finite on the grid")
    fvals = grid.node_values(f)[interior]
    if not np.isfinite(fvals).all():
        raise ValueError("right-hand side is not finite on the grid")
    strides = [math.prod(grid.shape[i + 1:]) for i in range(n)]
    rows, cols, vals = [], [], []

    # interior rows carry a factor h^2 so every row has O(1) entries
    def add(offset, coef):
        rows.append(interior)
        cols.append(interior + offset)
        vals.append(coef * h**2)

    center = c.copy()
    for i in range(n):
        aii = A[:, i, i] / h**2
        center -= 2 * aii
        if one_sided_b:
            add(strides[i], aii + b[:, i] / h)
            add(-strides[i], aii)
            center -= b[:, i] / h
        else:
            add(strides[i], aii + b[:, i] / (2 * h))
            add(-strides[i], aii - b[:, i] / (2 * h))
        for j in range(i + 1, n):
            aij = A[:, i, j] / (2 * h**2)
            add(strides[i] + strides[j], aij)
            add(-strides[i] - strides[j], aij)
            add(strides[i] - strides[j], -aij)
            add(-strides[i] + strides[j], -aij)
    add(0, center)
    peclet = np.abs(b) * h / (2 * np.maximum(np.diagonal(A, axis1=1, axis2=2), 1e-300))
    if peclet.max() > 1:
        warnings.warn(f"cell Peclet number {peclet.max():.3g} > 1: h too coarse for diagonal dominance",
                      DiscretizationWarning, stacklevel=2)
    bnodes = np.flatnonzero(grid.boundary_mask)
    rows.append(bnodes)
    cols.append(bnodes)
    vals.append(np.ones(bnodes.size))
    M = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(grid.size, grid.size))
    M.eliminate_zeros()
    rhs = np.zeros(grid.size)
    rhs[interior] = fvals * h**2
    rhs[bnodes] = grid.node_values(bdry)[bnodes]
    return LinearSystem(M, rhs, grid)


# unknown count above which "auto" switches to the Krylov path
DIRECT_LIMIT = 300_000


def solve_dirichlet(op: OperatorData, grid: Grid, f, bdry, mode: str = "auto", tol: float = 1e-10,
                    max_iters: int = 2000, one_sided_b: bool = False) -> GridField:
    """Solve the Dirichlet problem; raises SolverError unless the relative residual <= tol."""
    system = discretize(op, grid, f, bdry, one_sided_b=one_sided_b)
    M, rhs = system.matrix, system.rhs
    if mode == "auto":
        mode = "direct" if grid.size <= DIRECT_LIMIT else "iterative"
    if mode == "direct":
        try:
            x = spla.splu(M.tocsc()).solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"direct factorization failed: {exc}") from None
    elif mode == "iterative":
        x = _krylov(M, rhs, tol, max_iters)
    else:
        raise ValueError(f"unknown solver mode {mode!r}")
    if not np.isfinite(x).all():
        raise SolverError("solution contains NaN or inf")
    res = backward_error(M, x, rhs)
    if res > tol:
        raise SolverError(f"relative residual {res:.3g} above tolerance {tol:.1g}", res)
    return GridField(grid, x)


def backward_error(M, x, rhs) -> float:
    """Normwise relative residual ``|Mx - b| / (|M| |x| + |b|)`` in the max norm."""
    r = np.abs(M @ x - rhs).max()
    Mnorm = np.abs(M).sum(axis=1).max()
    return float(r / max(Mnorm * np.abs(x).max() + np.abs(rhs).max(), 1e-300))


def _krylov(M, rhs, tol, max_iters):
    """ILU-preconditioned restarted GMRES with iterative refinement on stagnation."""
    ilu = spla.spilu(M.tocsc(), drop_tol=1e-5, fill_factor=20)
    pre = spla.LinearOperator(M.shape, ilu.solve)
    x = np.zeros_like(rhs)
    scale = max(np.linalg.norm(rhs), 1e-300)
    history = []
    for _ in range(10):
        r = rhs - M @ x
        res = backward_error(M, x, rhs) if x.any() else 1.0
        history.append(res)
        if res <= tol:
            return x
        if len(history) > 2 and history[-1] > 0.5 * history[-2]:
            raise SolverError(f"Krylov iteration stagnated at relative residual {res:.3g}", res)
        dx, info = spla.gmres(M, r, M=pre, rtol=tol * scale / max(np.linalg.norm(r), 1e-300),
                              atol=0.0, restart=100, maxiter=max(max_iters // 100, 1))
        if not np.isfinite(dx).all():
            raise SolverError("Krylov breakdown (NaN)", res)
        x = x + dx
    return x


@dataclass
class ConvergenceResult:
    N: list
    h: list
    errors: list
    order: float | None
    exact: bool

    @property
    def label(self) -> str:
        return "exact" if self.exact else f"{self.order:.3f}"

    def to_csv(self) -> str:
        lines = ["N,h,error"]
        lines += [f"{N},{h:.17g},{e:.17g}" for N, h, e in zip(self.N, self.h, self.errors)]
        lines.append(f"# order,{self.label}")
        return "\n".join(lines) + "\n"


def fit_order(h, errors) -> float:
    """Least-squares slope of log(error) against log(h)."""
    slope, _ = np.polyfit(np.log(np.asarray(h, float)), np.log(np.asarray(errors, float)), 1)
    return float(slope)


def convergence_study(error_at, N_list, exact_tol: float = 1e-9) -> ConvergenceResult:
    """Run ``error_at(N)`` over the levels and fit the observed order."""
    N_list = sorted(int(N) for N in N_list)
    if len(N_list) < 2:
        raise ValueError("a convergence study needs at least 2 grid levels")
    errors = [float(error_at(N)) for N in N_list]
    h = [1.0 / N for N in N_list]
    if max(errors) <= exact_tol:
        return ConvergenceResult(N_list, h, errors, None, True)
    return ConvergenceResult(N_list, h, errors, fit_order(h, errors), False)


def max_error(field: GridField, exact, mask=None) -> float:
    diff = np.abs(field.values - field.grid.node_values(exact))
    if mask is not None:
        diff = diff[mask]
    return float(diff.max())
