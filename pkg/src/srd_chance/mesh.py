"""Uniform grids on the unit square, discrete elliptic operators and
reusable sparse factorizations.

Nodes are numbered lexicographically with ``x1`` running fastest, i.e. node
``(i, j)`` at ``(i*h, j*h)`` has index ``j*n + i``.  Operators act on the
*free* (non-Dirichlet) nodes only; homogeneous Dirichlet values are
eliminated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import math
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DefinitenessError, GridMismatchError, InvalidGridError

INTERIOR, NEUMANN, DIRICHLET = 0, 1, 2
TAG_NAMES = {INTERIOR: "interior", NEUMANN: "neumann", DIRICHLET: "dirichlet"}

LINEAR_NEUMANN = "linear_neumann"
BILINEAR_DIRICHLET = "bilinear_dirichlet"


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform ``n x n`` node grid on ``[0, 1]^2`` with boundary tags."""

    n: int
    problem: str
    tags: np.ndarray
    constraint_points: np.ndarray
    free: np.ndarray = field(repr=False)
    free_index: np.ndarray = field(repr=False)

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def num_nodes(self) -> int:
        return self.n * self.n

    @property
    def num_free(self) -> int:
        return self.free.size

    @property
    def M(self) -> int:
        return self.constraint_points.size

    @property
    def x1(self) -> np.ndarray:
        return np.tile(np.arange(self.n), self.n) * self.h

    @property
    def x2(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.n) * self.h

    @property
    def neumann_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.tags == NEUMANN)

    @property
    def constraint_free(self) -> np.ndarray:
        """Constraint points as indices into the free-node vector."""
        return self.free_index[self.constraint_points]

    def field(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        """Evaluate ``fn(x1, x2)`` at every node."""
        return np.broadcast_to(np.asarray(fn(self.x1, self.x2), float), (self.num_nodes,)).copy()

    def restrict(self, full: np.ndarray) -> np.ndarray:
        return np.asarray(full)[..., self.free]

    def extend(self, free_values: np.ndarray) -> np.ndarray:
        """Embed free-node values into a full grid field (zeros on Dirichlet)."""
        free_values = np.asarray(free_values)
        out = np.zeros(free_values.shape[:-1] + (self.num_nodes,), dtype=free_values.dtype)
        out[..., self.free] = free_values
        return out


def build_grid(n: int, problem: str = LINEAR_NEUMANN, constraint_stride: int = 1) -> Grid:
    """Tag the nodes of an ``n x n`` grid and choose constraint points.

    For ``linear_neumann`` the edge ``x1 = 0`` is Neumann except for its two
    corners, which stay Dirichlet together with the other three edges.  For
    ``bilinear_dirichlet`` the whole boundary is Dirichlet.  Constraint
    points are every ``constraint_stride``-th free node in lexicographic
    order.
    """
    if int(n) != n or n < 3:
        raise InvalidGridError(f"grid needs n >= 3 nodes per side, got {n!r}")
    if int(constraint_stride) != constraint_stride or constraint_stride < 1:
        raise InvalidGridError(f"constraint_stride must be a positive integer, got {constraint_stride!r}")
    if problem not in (LINEAR_NEUMANN, BILINEAR_DIRICHLET):
        raise InvalidGridError(f"unknown problem kind {problem!r}")
    n = int(n)
    i = np.tile(np.arange(n), n)
    j = np.repeat(np.arange(n), n)
    on_boundary = (i == 0) | (i == n - 1) | (j == 0) | (j == n - 1)
    tags = np.where(on_boundary, DIRICHLET, INTERIOR).astype(np.int8)
    if problem == LINEAR_NEUMANN:
        tags[(i == 0) & (j > 0) & (j < n - 1)] = NEUMANN
    free = np.flatnonzero(tags != DIRICHLET)
    free_index = np.full(n * n, -1, dtype=np.int64)
    free_index[free] = np.arange(free.size)
    points = free[:: int(constraint_stride)].copy()
    for arr in (tags, free, free_index, points):
        arr.setflags(write=False)
    return Grid(n=n, problem=problem, tags=tags, constraint_points=points, free=free, free_index=free_index)


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Sparse matrix together with what it discretizes."""

    kind: str
    matrix: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x

    def dump_coo(self, path) -> None:
        """Write ``row col value`` triples (debugging aid)."""
        coo = self.matrix.tocoo()
        np.savetxt(path, np.column_stack([coo.row, coo.col, coo.data]),
                   fmt=["%d", "%d", "%.17g"], header=f"{self.kind} {coo.shape[0]}x{coo.shape[1]}")


def identity_scaled(size: int, c: float) -> DiscreteOperator:
    return DiscreteOperator("identity_scaled", sp.identity(size, format="csr") * float(c))


# ----------------------------------------------------------------------
# finite differences (linear problem)
# ----------------------------------------------------------------------

def rhs_weights(grid: Grid) -> np.ndarray:
    """Row weights of the symmetrized stencil: 1 inside, 1/2 on the Neumann edge."""
    return np.where(grid.tags[grid.free] == NEUMANN, 0.5, 1.0)


def assemble_laplacian_mixed(grid: Grid) -> DiscreteOperator:
    """Five-point ``-Laplace`` on the free nodes.

    Neumann rows use a ghost-node closure, which makes the row for node
    ``(0, j)`` read ``(4y_0 - 2y_1 - y_up - y_down)/h^2``; these rows are
    halved so that the matrix is symmetric.  The matching right-hand side
    must therefore be multiplied by :func:`rhs_weights`.  On a grid without
    Neumann nodes this is the plain Dirichlet stencil.
    """
    n, h2 = grid.n, grid.h ** 2
    free = grid.free
    fi = grid.free_index
    i, j = free % n, free // n
    w = rhs_weights(grid)
    rows, cols, vals = [np.arange(free.size)], [np.arange(free.size)], [4.0 * w / h2]
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ii, jj = i + di, j + dj
        inside = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n)
        nb = np.where(inside, jj * n + ii, 0)
        nb_free = inside & (fi[nb] >= 0)
        coef = np.full(free.size, -1.0 / h2)
        neu = grid.tags[free] == NEUMANN
        if di == 0:
            coef[neu] = -0.5 / h2
        else:
            # ghost node doubles the inward neighbour, halving undoes it
            coef[neu] = -1.0 / h2
        rows.append(np.flatnonzero(nb_free))
        cols.append(fi[nb[nb_free]])
        vals.append(coef[nb_free])
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(free.size, free.size))
    A.sum_duplicates()
    return DiscreteOperator("laplacian_mixed", A)


def boundary_injection(grid: Grid, boundary_field: np.ndarray) -> np.ndarray:
    """Right-hand side contribution of Neumann data ``grad y . n = xi``.

    ``boundary_field`` holds values at the Neumann nodes (ordered by
    ``x2``).  With the halved ghost-node rows the contribution is ``xi/h``.
    Batched input of shape ``(..., n_neumann)`` is supported.
    """
    if grid.problem != LINEAR_NEUMANN:
        raise GridMismatchError("boundary injection needs a linear_neumann grid")
    xi = np.asarray(boundary_field, dtype=float)
    nodes = grid.neumann_nodes
    if xi.shape[-1] != nodes.size:
        raise ValueError(f"boundary field has {xi.shape[-1]} values, expected {nodes.size}")
    out = np.zeros(xi.shape[:-1] + (grid.num_free,))
    out[..., grid.free_index[nodes]] = xi / grid.h
    return out


def injection_matrix(grid: Grid) -> sp.csr_matrix:
    """Sparse matrix form of :func:`boundary_injection` (free x neumann)."""
    nodes = grid.neumann_nodes
    return sp.csr_matrix((np.full(nodes.size, 1.0 / grid.h), (grid.free_index[nodes], np.arange(nodes.size))),
                         shape=(grid.num_free, nodes.size))


def trapezoid_weights(grid: Grid) -> np.ndarray:
    """Nodal quadrature weights (composite trapezoid) over all nodes."""
    n = grid.n
    w1 = np.ones(n)
    w1[[0, -1]] = 0.5
    return np.outer(w1, w1).ravel() * grid.h ** 2


# ----------------------------------------------------------------------
# P1 finite elements (bilinear problem)
# ----------------------------------------------------------------------

def triangles(grid: Grid) -> np.ndarray:
    """Node triples of the two-triangles-per-cell mesh (diagonal SW-NE)."""
    n = grid.n
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="xy")
    a = (j * n + i).ravel()
    b, c, d = a + 1, a + n + 1, a + n
    return np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])


# int_T phi_a phi_b phi_c / |T|
_TRI3 = np.empty((3, 3, 3))
for _idx in itertools.product(range(3), repeat=3):
    _counts = [_idx.count(k) for k in range(3)]
    _TRI3[_idx] = 2.0 * np.prod([math.factorial(c) for c in _counts]) / math.factorial(5)
_TRI3.setflags(write=False)


def _local_geometry(grid: Grid):
    tri = triangles(grid)
    x = np.column_stack([grid.x1, grid.x2])[tri]          # (E, 3, 2)
    e1, e2 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * np.abs(det)
    # gradients of barycentric coordinates
    grads = np.empty((tri.shape[0], 3, 2))
    grads[:, 1] = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
    grads[:, 2] = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    return tri, area, grads


def _assemble_full(grid: Grid, tri: np.ndarray, local: np.ndarray) -> sp.csr_matrix:
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    N = grid.num_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(N, N))


def _restrict_matrix(grid: Grid, full: sp.spmatrix) -> sp.csr_matrix:
    return full.tocsr()[grid.free][:, grid.free].tocsr()


@dataclass(frozen=True, eq=False)
class FemOperators:
    stiffness: DiscreteOperator
    mass: DiscreteOperator
    mass_chol: sp.csr_matrix
    full_mass: sp.csr_matrix
    lumped: bool = False


def assemble_fem(grid: Grid, lumped: bool = False) -> FemOperators:
    """P1 stiffness and mass on the free nodes plus a mass factor ``L L^T = M``.

    ``full_mass`` is the mass matrix over *all* nodes, used for control
    inner products.  With ``lumped=True`` the mass is replaced by its row
    sums (diagonal) and the factor is its square root.
    """
    if grid.problem != BILINEAR_DIRICHLET:
        raise GridMismatchError("finite element operators need a bilinear_dirichlet grid")
    tri, area, grads = _local_geometry(grid)
    k_loc = area[:, None, None] * np.einsum("eak,ebk->eab", grads, grads)
    m_loc = area[:, None, None] * (np.full((3, 3), 1.0 / 12.0) + np.eye(3) / 12.0)
    K_full = _assemble_full(grid, tri, k_loc)
    M_full = _assemble_full(grid, tri, m_loc)
    if lumped:
        M_full = sp.diags(np.asarray(M_full.sum(axis=1)).ravel()).tocsr()
    K = _restrict_matrix(grid, K_full)
    M = _restrict_matrix(grid, M_full)
    if lumped:
        L = sp.diags(np.sqrt(M.diagonal())).tocsr()
    else:
        L = factorize(DiscreteOperator("mass", M)).cholesky_factor()
    return FemOperators(DiscreteOperator("stiffness", K), DiscreteOperator("mass", M), L, M_full, lumped)


def assemble_control_mass(grid: Grid, u: np.ndarray, restrict: bool = True) -> DiscreteOperator:
    """Matrix of ``(y, v) -> int u y v`` for a nodal field ``u`` on all nodes."""
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.num_nodes,):
        raise ValueError(f"u must be a full grid field of length {grid.num_nodes}")
    tri, area, _ = _local_geometry(grid)
    local = area[:, None, None] * np.einsum("abc,ec->eab", _TRI3, u[tri])
    full = _assemble_full(grid, tri, local)
    return DiscreteOperator("control_mass", _restrict_matrix(grid, full) if restrict else full)


def control_mass_gradient(grid: Grid, q: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient in ``u`` of ``q^T M(u) y`` for free-node vectors ``q``, ``y``.

    Batched: ``q`` and ``y`` of shape ``(S, num_free)`` return the sum over
    the batch.  The result is a full grid field.
    """
    tri, area, _ = _local_geometry(grid)
    q = np.atleast_2d(grid.extend(np.asarray(q, float)))
    y = np.atleast_2d(grid.extend(np.asarray(y, float)))
    local = np.einsum("abc,sea,seb->ec", _TRI3, q[:, tri], y[:, tri]) * area[:, None]
    return np.bincount(tri.ravel(), weights=local.ravel(), minlength=grid.num_nodes)


# ----------------------------------------------------------------------
# factorizations
# ----------------------------------------------------------------------

class Factorization:
    """Sparse symmetric factorization ``P A P^T = U^T D^{-1} U``.

    Wraps SuperLU run in symmetric mode without row pivoting, so for an SPD
    matrix the pivots are the ``LDL^T`` pivots and a non-positive pivot
    proves indefiniteness.
    """

    self_adjoint = True

    def __init__(self, op: DiscreteOperator | sp.spmatrix):
        A = op.matrix if isinstance(op, DiscreteOperator) else op
        A = sp.csc_matrix(A)
        self.kind = op.kind if isinstance(op, DiscreteOperator) else "matrix"
        self.shape = A.shape
        if A.shape[0] != A.shape[1]:
            raise DefinitenessError("cannot factorize a non-square operator")
        asym = abs(A - A.T)
        if asym.nnz and asym.max() > 1e-12 * max(abs(A).max(), 1e-300):
            raise DefinitenessError(f"operator {self.kind} is not symmetric")
        try:
            self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise DefinitenessError(f"factorization of {self.kind} failed: {exc}") from exc
        if not np.array_equal(self._lu.perm_r, self._lu.perm_c):
            raise DefinitenessError(f"operator {self.kind} needed row pivoting, not SPD")
        piv = self._lu.U.diagonal()
        if np.any(piv <= 0) or not np.all(np.isfinite(piv)):
            raise DefinitenessError(
                f"operator {self.kind} is not positive definite (min pivot {piv.min():.3e})")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for one right-hand side (1-D) or several (columns of 2-D)."""
        rhs = np.asarray(rhs, dtype=float)
        return self._lu.solve(np.ascontiguousarray(rhs) if rhs.ndim == 1 else np.asfortranarray(rhs))

    def solve_rows(self, rhs_rows: np.ndarray) -> np.ndarray:
        """Solve for every row of ``rhs_rows`` (shape ``(S, n)``)."""
        return self.solve(np.asarray(rhs_rows).T).T

    def cholesky_factor(self) -> sp.csr_matrix:
        """Sparse ``F`` with ``F F^T = A``."""
        U = self._lu.U.tocsr()
        d = U.diagonal()
        F_perm = (sp.diags(1.0 / np.sqrt(d)) @ U).T.tocsr()
        # P_r A P_c = L U with P_r = P_c, hence A = F F^T with rows in perm_r order
        return F_perm[self._lu.perm_r].tocsr()


def factorize(op) -> Factorization:
    return Factorization(op)


def solve(fac: Factorization, rhs: np.ndarray) -> np.ndarray:
    return fac.solve(rhs)
