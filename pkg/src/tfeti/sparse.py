"""Sparse and dense kernels backing the dual operator.

The centrepiece is a two-stage sparse Cholesky: a symbolic stage that picks
a fill-reducing permutation and fixes the factor pattern once, and a numeric
stage that refills values into that pattern as often as needed.  Around it
sit the triangular solves in every storage/order variant, sparse products,
a symmetric rank-k update and a dense Cholesky for small SPD systems.

Storage conventions
-------------------
``SparseCsr`` keeps one compressed index structure plus an orientation flag:
``"row"`` means the arrays compress rows, ``"col"`` means they compress
columns, i.e. they describe the transpose.  A Cholesky factor is stored
canonically as the rows of the upper factor U (diagonal entry first per
row); the identical arrays read as the columns of L = U^T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.linalg.blas import dsyrk, dtrsm
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _kernels as _k

ORDERS = ("row", "col")
STORAGES = ("sparse", "dense")


class SparseFormatError(ValueError):
    """Malformed or structurally unsuitable sparse input."""


class SpdError(ArithmeticError):
    """A non-positive pivot was met: the matrix is not SPD."""


class SingularFactorError(ArithmeticError):
    """A triangular factor carries a zero diagonal entry."""


class KernelMismatchError(ValueError):
    """A claimed kernel basis does not annihilate the matrix."""


def _as_int(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _as_float(a):
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SparseCsr:
    """Compressed sparse matrix with an explicit orientation flag."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    orientation: str = "row"

    def __post_init__(self):
        if self.orientation not in ORDERS:
            raise SparseFormatError(f"unknown orientation {self.orientation!r}")
        self.indptr = _as_int(self.indptr)
        self.indices = _as_int(self.indices)
        self.data = _as_float(self.data)
        major = self.shape[0] if self.orientation == "row" else self.shape[1]
        minor = self.shape[1] if self.orientation == "row" else self.shape[0]
        if self.indptr.shape[0] != major + 1:
            raise SparseFormatError("indptr length does not match shape")
        if np.any(np.diff(self.indptr) < 0):
            raise SparseFormatError("indptr must be nondecreasing")
        if self.indices.shape[0] != self.indptr[-1] or self.data.shape[0] != self.indptr[-1]:
            raise SparseFormatError("indices/data length does not match indptr")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= minor):
            raise SparseFormatError("index out of range")
        for i in range(major):
            seg = self.indices[self.indptr[i]:self.indptr[i + 1]]
            if seg.size > 1 and np.any(np.diff(seg) <= 0):
                raise SparseFormatError("indices must be strictly increasing per compressed line")

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @classmethod
    def from_coo(cls, rows, cols, vals, shape, orientation="row"):
        """Deduplicating COO -> compressed conversion (duplicates summed)."""
        rows = _as_int(rows)
        cols = _as_int(cols)
        vals = _as_float(vals)
        if orientation == "col":
            rows, cols = cols, rows
            shape_mj = (shape[1], shape[0])
        else:
            shape_mj = shape
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            keep = np.concatenate(([True], (np.diff(rows) != 0) | (np.diff(cols) != 0)))
            starts = np.flatnonzero(keep)
            summed = np.add.reduceat(vals, starts)
            rows, cols, vals = rows[starts], cols[starts], summed
        indptr = np.zeros(shape_mj[0] + 1, np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(tuple(shape), indptr, cols, vals, orientation)

    @classmethod
    def from_dense(cls, a, orientation="row", keep_diagonal=False):
        a = np.asarray(a, dtype=np.float64)
        mask = a != 0.0
        if keep_diagonal:
            mask[np.diag_indices(min(a.shape))] = True
        rows, cols = np.nonzero(mask)
        return cls.from_coo(rows, cols, a[rows, cols], a.shape, orientation)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls((n, n), np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    def to_dense(self, out=None):
        m, n = self.shape
        if out is None:
            out = np.zeros((m, n))
        else:
            out[:, :] = 0.0
        n_major = m if self.orientation == "row" else n
        rows = np.repeat(np.arange(n_major), np.diff(self.indptr))
        if self.orientation == "row":
            out[rows, self.indices] = self.data
        else:
            out[self.indices, rows] = self.data
        return out

    def transpose(self) -> "SparseCsr":
        """Logical transpose: same arrays, flipped orientation."""
        flip = "col" if self.orientation == "row" else "row"
        return SparseCsr((self.shape[1], self.shape[0]), self.indptr, self.indices, self.data, flip)

    def reorient(self, orientation) -> "SparseCsr":
        """Exact conversion between row- and column-compressed storage."""
        if orientation not in ORDERS:
            raise SparseFormatError(f"unknown orientation {orientation!r}")
        if orientation == self.orientation:
            return self
        n_major = self.shape[0] if self.orientation == "row" else self.shape[1]
        n_minor = self.shape[1] if self.orientation == "row" else self.shape[0]
        major_of = np.repeat(np.arange(n_major, dtype=np.int64), np.diff(self.indptr))
        order = np.lexsort((major_of, self.indices))
        indptr = np.zeros(n_minor + 1, np.int64)
        np.add.at(indptr, self.indices + 1, 1)
        np.cumsum(indptr, out=indptr)
        return SparseCsr(self.shape, indptr, major_of[order], self.data[order], orientation)

    def row_arrays(self):
        """(indptr, indices, data) compressing the rows of the logical matrix."""
        return self.reorient("row")._arrays()

    def _arrays(self):
        return self.indptr, self.indices, self.data

    def to_scipy(self) -> csr_matrix:
        ip, ix, dt = self.row_arrays()
        return csr_matrix((dt, ix, ip), shape=self.shape)

    def scale(self, alpha) -> "SparseCsr":
        return SparseCsr(self.shape, self.indptr, self.indices, self.data * alpha, self.orientation)

    def pattern_equal(self, other: "SparseCsr") -> bool:
        return (
            self.shape == other.shape
            and self.orientation == other.orientation
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )


@dataclass(eq=False)
class DenseMat:
    """Dense matrix pinned to an explicit memory order."""

    values: np.ndarray
    order: str = "row"

    def __post_init__(self):
        if self.order not in ORDERS:
            raise SparseFormatError(f"unknown order {self.order!r}")
        want_c = self.order == "row"
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise SparseFormatError("DenseMat expects a 2-D array")
        self.values = np.ascontiguousarray(v) if want_c else np.asfortranarray(v)

    @property
    def shape(self):
        return self.values.shape

    def as_order(self, order) -> "DenseMat":
        if order == self.order:
            return self
        return DenseMat(self.values, order)

    def copy(self) -> "DenseMat":
        return DenseMat(self.values.copy(), self.order)


def _empty_in_order(shape, order):
    return np.empty(shape, order="C" if order == "row" else "F")


# ---------------------------------------------------------------------------
# two-stage Cholesky
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class CholSymbolic:
    """Result of the symbolic stage: permutation and frozen factor pattern."""

    n: int
    perm: np.ndarray          # permuted position -> original index
    iperm: np.ndarray
    parent: np.ndarray        # elimination tree over permuted indices
    rowptr: np.ndarray        # below-diagonal pattern of each factor row
    rowind: np.ndarray
    up: np.ndarray            # canonical pattern: rows of U, diagonal first
    ui: np.ndarray
    aptr: np.ndarray          # permuted upper triangle of the input pattern
    aind: np.ndarray
    asrc: np.ndarray          # positions into the input data array
    input_indptr: np.ndarray  # pattern the value arrays must match
    input_indices: np.ndarray
    nnz: int
    fill: int
    _csc: tuple | None = field(default=None, repr=False)

    def csc_pattern(self):
        """Column-compressed pattern of U plus the value gather map."""
        if self._csc is None:
            n = self.n
            rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.up))
            order = np.lexsort((rows, self.ui))
            cp = np.zeros(n + 1, np.int64)
            np.add.at(cp, self.ui + 1, 1)
            np.cumsum(cp, out=cp)
            self._csc = (cp, rows[order], _as_int(order))
        return self._csc


class CholFactor:
    """Numeric Cholesky factor over a fixed symbolic pattern.

    ``values`` may live in caller-provided storage (e.g. a pool region) and
    is refilled in place by :func:`numeric_factorize`; the pattern arrays are
    shared with the symbolic object and never reallocated.
    """

    def __init__(self, symbolic: CholSymbolic, values: np.ndarray | None = None):
        self.symbolic = symbolic
        if values is None:
            values = np.empty(symbolic.nnz)
        if values.shape != (symbolic.nnz,):
            raise SparseFormatError("factor value buffer has the wrong length")
        self.values = values
        self.version = 0
        self._csc_values = None
        self._csc_version = -1

    @property
    def n(self) -> int:
        return self.symbolic.n

    def refill(self, matrix: SparseCsr) -> None:
        s = self.symbolic
        if not (
            np.array_equal(matrix.indptr, s.input_indptr)
            and np.array_equal(matrix.indices, s.input_indices)
        ):
            raise SparseFormatError("matrix pattern differs from the symbolic stage")
        bad = _k.chol_numeric(
            s.n, s.aptr, s.aind, s.asrc, matrix.data, s.rowptr, s.rowind, s.up, s.ui, self.values
        )
        if bad >= 0:
            raise SpdError(f"non-positive pivot at permuted row {bad}: matrix is not SPD")
        self.version += 1

    def row_arrays(self):
        """U compressed by rows (diagonal first per row)."""
        s = self.symbolic
        return s.up, s.ui, self.values

    def col_arrays(self):
        """U compressed by columns (diagonal last per column)."""
        cp, ci, gather = self.symbolic.csc_pattern()
        if self._csc_version != self.version:
            if self._csc_values is None:
                self._csc_values = np.empty(self.symbolic.nnz)
            np.take(self.values, gather, out=self._csc_values)
            self._csc_version = self.version
        return cp, ci, self._csc_values

    def diagonal(self):
        s = self.symbolic
        return self.values[s.up[:-1]]

    def upper_csr(self) -> SparseCsr:
        s = self.symbolic
        return SparseCsr((s.n, s.n), s.up, s.ui, self.values)

    def solve(self, b, out=None, work=None):
        """x = K_reg^-1 b through the permuted factor (U^T U x_p = b_p)."""
        s = self.symbolic
        b = np.asarray(b, dtype=np.float64)
        if work is None:
            work = np.empty(s.n)
        np.take(b, s.perm, out=work)
        X = work.reshape(-1, 1)
        _k.utsolve_rows(s.up, s.ui, self.values, X)
        _k.usolve_rows(s.up, s.ui, self.values, X)
        if out is None:
            out = np.empty(s.n)
        out[s.perm] = work
        return out


def symbolic_factorize(pattern: SparseCsr, ordering="rcm") -> CholSymbolic:
    """Choose a fill-reducing permutation and freeze the factor pattern.

    ``ordering`` is ``"rcm"`` (reverse Cuthill-McKee, the default),
    ``"natural"`` (identity), or an explicit permutation array mapping
    permuted positions to original indices.  The factor pattern comes from
    symbolic elimination over the elimination tree.  The input pattern must
    be structurally symmetric.
    """
    m, n = pattern.shape
    if m != n:
        raise SparseFormatError("pattern must be square")
    rows = pattern.reorient("row")
    ip, ix, _ = rows._arrays()
    # structural symmetry: the column-compressed view must carry the same
    # index structure as the row-compressed one
    cols = pattern.reorient("row").transpose().reorient("row")
    if not (np.array_equal(cols.indptr, ip) and np.array_equal(cols.indices, ix)):
        raise SparseFormatError("pattern is structurally non-symmetric")

    if isinstance(ordering, str):
        if ordering == "rcm":
            sp = csr_matrix((np.ones(rows.nnz), ix.astype(np.int32), ip.astype(np.int32)), shape=(n, n))
            perm = _as_int(reverse_cuthill_mckee(sp, symmetric_mode=True))
        elif ordering == "natural":
            perm = np.arange(n, dtype=np.int64)
        else:
            raise SparseFormatError(f"unknown ordering {ordering!r}")
    else:
        perm = _as_int(ordering)
        if sorted(perm.tolist()) != list(range(n)):
            raise SparseFormatError("explicit ordering is not a permutation")
    iperm = np.empty(n, np.int64)
    iperm[perm] = np.arange(n, dtype=np.int64)

    # permuted pattern, upper triangle by rows, with source positions
    src = np.arange(rows.nnz, dtype=np.int64)
    prow = iperm[np.repeat(np.arange(n, dtype=np.int64), np.diff(ip))]
    pcol = iperm[ix]
    upper = pcol >= prow
    prow_u, pcol_u, src_u = prow[upper], pcol[upper], src[upper]
    order = np.lexsort((pcol_u, prow_u))
    prow_u, pcol_u, src_u = prow_u[order], pcol_u[order], src_u[order]
    aptr = np.zeros(n + 1, np.int64)
    np.add.at(aptr, prow_u + 1, 1)
    np.cumsum(aptr, out=aptr)

    # the elimination loop walks the upper triangle by columns, so compress
    # the upper entries by their column index
    lptr = np.zeros(n + 1, np.int64)
    np.add.at(lptr, pcol_u + 1, 1)
    np.cumsum(lptr, out=lptr)
    lorder = np.lexsort((prow_u, pcol_u))
    lind = prow_u[lorder]
    parent = _k.etree(n, lptr, lind)

    rowptr = np.cumsum(_k.factor_row_counts(n, lptr, lind, parent))
    rowind = np.empty(rowptr[-1], np.int64)
    _k.factor_row_pattern(n, lptr, lind, parent, rowptr, rowind)

    nnz = int(rowptr[-1] + n)
    up = np.zeros(n + 1, np.int64)
    np.add.at(up, rowind + 1, 1)
    up[1:] += 1  # diagonal entry per column of L == per row of U
    np.cumsum(up, out=up)
    ui = np.empty(nnz, np.int64)
    _k.factor_column_pattern(n, rowptr, rowind, up, ui)

    fill = nnz - int(np.count_nonzero(upper))
    return CholSymbolic(
        n=n, perm=perm, iperm=iperm, parent=parent,
        rowptr=_as_int(rowptr), rowind=rowind, up=up, ui=ui,
        aptr=lptr, aind=lind, asrc=src_u[lorder],
        input_indptr=ip.copy(), input_indices=ix.copy(),
        nnz=nnz, fill=fill,
    )


def numeric_factorize(symbolic: CholSymbolic, matrix: SparseCsr, out: CholFactor | None = None) -> CholFactor:
    """Fill (or refill) factor values; the pattern never changes."""
    factor = out if out is not None else CholFactor(symbolic)
    if factor.symbolic is not symbolic:
        raise SparseFormatError("factor belongs to a different symbolic stage")
    factor.refill(matrix.reorient("row"))
    return factor


def regularize(stiffness: SparseCsr, kernel: np.ndarray, check_tol: float = 1e-8) -> SparseCsr:
    """SPD shift of a singular stiffness: K + rho * Q Q^T over its kernel.

    ``kernel`` columns must span ker K; they are orthonormalized here and
    the shift magnitude is trace(K)/n, so the inverse of the result is a
    generalized inverse of K.  An empty kernel returns K unchanged.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim == 1:
        kernel = kernel.reshape(-1, 1)
    n = stiffness.shape[0]
    if stiffness.shape[1] != n:
        raise SparseFormatError("stiffness must be square")
    if kernel.shape[1] == 0:
        return SparseCsr(stiffness.shape, stiffness.indptr.copy(), stiffness.indices.copy(),
                         stiffness.data.copy(), stiffness.orientation)
    if kernel.shape[0] != n:
        raise SparseFormatError("kernel row count does not match the matrix")
    dense = stiffness.to_dense()
    norm_k = np.linalg.norm(dense)
    if np.linalg.norm(dense @ kernel) > check_tol * max(norm_k, 1.0):
        raise KernelMismatchError("claimed kernel does not annihilate the stiffness")
    q, _ = np.linalg.qr(kernel)
    rho = np.trace(dense) / n
    shift = q @ q.T
    shift = 0.5 * (shift + shift.T)
    dense += rho * shift
    return SparseCsr.from_dense(dense, keep_diagonal=True)


# ---------------------------------------------------------------------------
# triangular solves with a right-hand-side block
# ---------------------------------------------------------------------------


def _check_variant(factor_storage, factor_order, rhs_order):
    if factor_storage not in STORAGES:
        raise SparseFormatError(f"unknown factor storage {factor_storage!r}")
    if factor_order not in ORDERS or rhs_order not in ORDERS:
        raise SparseFormatError("unknown memory order")


def triangular_solve_multi(
    factor: CholFactor,
    rhs: DenseMat,
    transpose: bool = False,
    factor_storage: str = "sparse",
    factor_order: str = "row",
    rhs_order: str = "row",
    out: np.ndarray | None = None,
    dense_factor_work: np.ndarray | None = None,
) -> DenseMat:
    """Solve U X = B or U^T X = B under every storage/order variant.

    All eight (storage, factor order, RHS order) combinations run genuinely
    different kernels or BLAS call shapes but agree to roundoff.  The
    solution comes back in ``rhs_order``.  ``out``/``dense_factor_work``
    let callers provide pool-backed workspace.
    """
    _check_variant(factor_storage, factor_order, rhs_order)
    n = factor.n
    b = rhs.values
    if b.shape[0] != n:
        raise SparseFormatError("right-hand side height does not match the factor")
    if np.any(factor.diagonal() == 0.0):
        raise SingularFactorError("zero diagonal entry in triangular factor")

    if out is None:
        X = _empty_in_order(b.shape, rhs_order)
    else:
        X = out
        if X.shape != b.shape:
            raise SparseFormatError("output buffer has the wrong shape")
    if X is not b:
        np.copyto(X, b)

    if factor_storage == "sparse":
        if factor_order == "row":
            up, ui, ux = factor.row_arrays()
            (_k.utsolve_rows if transpose else _k.usolve_rows)(up, ui, ux, X)
        else:
            cp, ci, cx = factor.col_arrays()
            (_k.utsolve_cols if transpose else _k.usolve_cols)(cp, ci, cx, X)
        return DenseMat(X, rhs_order)

    ud = factor_to_dense(factor, factor_order, out=dense_factor_work).values
    _dense_trsm_inplace(ud, factor_order, X, rhs_order, transpose)
    return DenseMat(X, rhs_order)


def _dense_trsm_inplace(ud, factor_order, X, rhs_order, transpose):
    """In-place BLAS triangular solve honoring both memory layouts.

    A row-major upper factor is fed to BLAS as its column-major transpose
    (a lower factor) with the trans flag flipped; a row-major RHS is solved
    from the right on its transposed view.  No copies are made.
    """
    if factor_order == "row":
        a, lower, base_trans = ud.T, 1, not transpose
    else:
        a, lower, base_trans = ud, 0, transpose
    if rhs_order == "col":
        res = dtrsm(1.0, a, X, side=0, lower=lower, trans_a=int(base_trans), overwrite_b=1)
        if not np.shares_memory(res, X):
            np.copyto(X, res)
    else:
        # U X = B  <=>  X^T U^T = B^T, solved from the right
        res = dtrsm(1.0, a, X.T, side=1, lower=lower, trans_a=int(not base_trans), overwrite_b=1)
        if not np.shares_memory(res, X):
            np.copyto(X, res.T)


def factor_to_dense(factor: CholFactor, order: str = "row", out: np.ndarray | None = None) -> DenseMat:
    """Densify the upper factor; entries below the diagonal are explicit zeros.

    A square ``out`` scratch of either layout is accepted: when its memory
    order disagrees with ``order`` the transposed view of the same buffer is
    filled instead, so pool workspace is reused without copies.
    """
    if order not in ORDERS:
        raise SparseFormatError(f"unknown order {order!r}")
    n = factor.n
    if out is None:
        out = np.zeros((n, n), order="C" if order == "row" else "F")
    else:
        if out.shape != (n, n):
            raise SparseFormatError("dense factor buffer has the wrong shape")
        want_c = order == "row"
        if want_c and not out.flags.c_contiguous and out.flags.f_contiguous:
            out = out.T
        elif not want_c and not out.flags.f_contiguous and out.flags.c_contiguous:
            out = out.T
        out[:, :] = 0.0
    up, ui, ux = factor.row_arrays()
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(up))
    out[rows, ui] = ux
    return DenseMat(out, order)


# ---------------------------------------------------------------------------
# products
# ---------------------------------------------------------------------------


def _effective_rows(a: SparseCsr, transpose: bool):
    """Resolve orientation+transpose into a row-compressed kernel choice."""
    ip, ix, dt = a._arrays()
    arrays_are_logical = a.orientation == "row"
    use_plain = arrays_are_logical != transpose
    return ip, ix, dt, use_plain


def sparse_apply(a: SparseCsr, x, transpose: bool = False, out=None):
    """y = A x or A^T x."""
    x = np.asarray(x, dtype=np.float64)
    m, n = a.shape
    rows, cols = (n, m) if transpose else (m, n)
    if x.shape != (cols,):
        raise SparseFormatError("vector length does not match the matrix")
    if out is None:
        out = np.empty(rows)
    ip, ix, dt, plain = _effective_rows(a, transpose)
    (_k.spmv_rows if plain else _k.spmv_rows_t)(ip, ix, dt, x, out)
    return out


def sparse_dense_multiply(a: SparseCsr, x: DenseMat, transpose: bool = False,
                          out: np.ndarray | None = None) -> DenseMat:
    """Y = A X or A^T X; the result follows the RHS memory order."""
    m, n = a.shape
    rows, cols = (n, m) if transpose else (m, n)
    if x.shape[0] != cols:
        raise SparseFormatError("dense block height does not match the matrix")
    if out is None:
        out = _empty_in_order((rows, x.shape[1]), x.order)
    ip, ix, dt, plain = _effective_rows(a, transpose)
    (_k.spmm_rows if plain else _k.spmm_rows_t)(ip, ix, dt, x.values, out)
    return DenseMat(out, x.order)


def syrk(a: DenseMat, out: np.ndarray | None = None) -> DenseMat:
    """C = A^T A: one triangle computed by BLAS, mirrored on output."""
    v = a.values
    m = v.shape[1]
    if out is not None and out.shape != (m, m):
        raise SparseFormatError("syrk output buffer has the wrong shape")
    if a.order == "col":
        c = dsyrk(1.0, v, trans=1, lower=0)
        upper = c
    else:
        # a C-ordered A is the F-ordered A^T, so compute (A^T)(A^T)^T
        c = dsyrk(1.0, v.T, trans=0, lower=0)
        upper = c
    full = np.triu(upper) + np.triu(upper, 1).T
    if out is not None:
        np.copyto(out, full)
        full = out
    return DenseMat(full, a.order)


def dense_matvec(f: DenseMat, x, symmetric_triangle: bool = False, out=None):
    """y = F x; in triangle mode only the stored upper triangle is read."""
    x = np.asarray(x, dtype=np.float64)
    if f.shape[1] != x.shape[0]:
        raise SparseFormatError("vector length does not match the matrix")
    if out is None:
        out = np.empty(f.shape[0])
    if symmetric_triangle:
        if f.shape[0] != f.shape[1]:
            raise SparseFormatError("triangle mode needs a square matrix")
        _k.symv_upper(f.values, x, out)
    else:
        np.dot(f.values, x, out=out)
    return out


# ---------------------------------------------------------------------------
# dense Cholesky (coarse problems, oracles)
# ---------------------------------------------------------------------------


class DenseCholesky:
    """Upper-triangular dense Cholesky with a LAPACK-backed solve."""

    def __init__(self, c: DenseMat | np.ndarray):
        a = c.values if isinstance(c, DenseMat) else np.asarray(c, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise SparseFormatError("dense Cholesky needs a square matrix")
        self.n = a.shape[0]
        if self.n == 0:
            self.upper = np.zeros((0, 0))
            return
        try:
            self.upper = scipy.linalg.cholesky(a, lower=False)
        except scipy.linalg.LinAlgError as err:
            raise SpdError(str(err)) from err

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        if self.n == 0:
            return b.copy()
        x, info = scipy.linalg.lapack.dpotrs(self.upper, b, lower=0)
        if info != 0:
            raise SpdError(f"dpotrs failed with info={info}")
        return x


def dense_cholesky(c: DenseMat | np.ndarray) -> DenseCholesky:
    return DenseCholesky(c)
