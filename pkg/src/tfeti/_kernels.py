"""Compiled inner loops for the sparse kernels.

Everything here operates on plain int64/float64 arrays so the numba
signatures stay stable and cacheable.  Factor arrays follow the canonical
layout produced by the symbolic stage: compressed rows of the upper factor
U with the diagonal entry first in each row.  The same arrays read as
compressed columns of L = U^T, which is what the factorization loop fills.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_jit = njit(cache=True, nogil=True)


# ---------------------------------------------------------------------------
# elimination tree / factor pattern
# ---------------------------------------------------------------------------


@_jit
def etree(n, indptr, indices):
    """Elimination tree of a symmetric pattern given by its compressed rows.

    Only entries below the diagonal of each row (equivalently, the upper
    triangle by columns) drive the tree; path compression keeps it near
    linear.
    """
    parent = np.full(n, -1, np.int64)
    ancestor = np.full(n, -1, np.int64)
    for k in range(n):
        for p in range(indptr[k], indptr[k + 1]):
            i = indices[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@_jit
def factor_row_counts(n, indptr, indices, parent):
    """Count the strictly-below-diagonal entries of each factor row.

    Row k of L reaches exactly the nodes on the etree paths from the
    below-diagonal entries of row k of A up to (but excluding) k.
    """
    counts = np.zeros(n + 1, np.int64)
    mark = np.full(n, -1, np.int64)
    for k in range(n):
        mark[k] = k
        cnt = 0
        for p in range(indptr[k], indptr[k + 1]):
            i = indices[p]
            if i >= k:
                continue
            while mark[i] != k:
                mark[i] = k
                cnt += 1
                i = parent[i]
        counts[k + 1] = cnt
    return counts


@_jit
def factor_row_pattern(n, indptr, indices, parent, rowptr, rowind):
    """Fill the per-row factor pattern, each row sorted ascending."""
    mark = np.full(n, -1, np.int64)
    for k in range(n):
        mark[k] = k
        nxt = rowptr[k]
        for p in range(indptr[k], indptr[k + 1]):
            i = indices[p]
            if i >= k:
                continue
            while mark[i] != k:
                mark[i] = k
                rowind[nxt] = i
                nxt += 1
                i = parent[i]
        seg = rowind[rowptr[k]:rowptr[k + 1]]
        seg.sort()


@_jit
def factor_column_pattern(n, rowptr, rowind, colptr, colind):
    """Build the column-compressed factor pattern from the row pattern.

    Column j receives its diagonal first (when row j is reached), then the
    rows referencing it in ascending order; this is exactly the fill order
    of the numeric stage.
    """
    fill = colptr[:n].copy()
    for k in range(n):
        for q in range(rowptr[k], rowptr[k + 1]):
            j = rowind[q]
            colind[fill[j]] = k
            fill[j] += 1
        colind[fill[k]] = k
        fill[k] += 1


@_jit
def chol_numeric(n, aptr, aind, asrc, avals, rowptr, rowind, up, ui, ux):
    """Up-looking Cholesky: fill U values over the fixed symbolic pattern.

    ``aptr/aind`` describe the upper triangle of the permuted matrix row by
    row (diagonal included); ``asrc`` maps each of those entries into
    ``avals``, the caller's unpermuted value array.  Returns -1 on success
    or the index of the first non-positive pivot.
    """
    fill = up[:n].copy()
    x = np.zeros(n)
    for k in range(n):
        d = 0.0
        for p in range(aptr[k], aptr[k + 1]):
            j = aind[p]
            v = avals[asrc[p]]
            if j == k:
                d = v
            else:
                x[j] = v
        for q in range(rowptr[k], rowptr[k + 1]):
            j = rowind[q]
            lkj = x[j] / ux[up[j]]
            x[j] = 0.0
            for p in range(up[j] + 1, fill[j]):
                x[ui[p]] -= ux[p] * lkj
            d -= lkj * lkj
            ux[fill[j]] = lkj
            fill[j] += 1
        if d <= 0.0:
            return k
        ux[fill[k]] = np.sqrt(d)
        fill[k] += 1
    return -1


# ---------------------------------------------------------------------------
# triangular solves, multiple right-hand sides, in place
#
# Four genuinely distinct traversals: the factor can be walked by rows of U
# or by columns of U, for both U x = b and U^T x = b.  The right-hand side
# block X may be C- or F-ordered; numba specializes on the layout.
# ---------------------------------------------------------------------------


@_jit
def usolve_rows(up, ui, ux, X):
    """Solve U X = B in place; U compressed by rows, diagonal first."""
    n = X.shape[0]
    k = X.shape[1]
    for i in range(n - 1, -1, -1):
        for p in range(up[i] + 1, up[i + 1]):
            j = ui[p]
            v = ux[p]
            for c in range(k):
                X[i, c] -= v * X[j, c]
        d = ux[up[i]]
        for c in range(k):
            X[i, c] /= d


@_jit
def utsolve_rows(up, ui, ux, X):
    """Solve U^T X = B in place; rows of U act as columns of U^T."""
    n = X.shape[0]
    k = X.shape[1]
    for j in range(n):
        d = ux[up[j]]
        for c in range(k):
            X[j, c] /= d
        for p in range(up[j] + 1, up[j + 1]):
            i = ui[p]
            v = ux[p]
            for c in range(k):
                X[i, c] -= v * X[j, c]


@_jit
def usolve_cols(cp, ci, cx, X):
    """Solve U X = B in place; U compressed by columns, diagonal last."""
    n = X.shape[0]
    k = X.shape[1]
    for j in range(n - 1, -1, -1):
        d = cx[cp[j + 1] - 1]
        for c in range(k):
            X[j, c] /= d
        for p in range(cp[j], cp[j + 1] - 1):
            i = ci[p]
            v = cx[p]
            for c in range(k):
                X[i, c] -= v * X[j, c]


@_jit
def utsolve_cols(cp, ci, cx, X):
    """Solve U^T X = B in place; columns of U act as rows of U^T."""
    n = X.shape[0]
    k = X.shape[1]
    for i in range(n):
        acc_rows = cp[i + 1] - 1
        for p in range(cp[i], acc_rows):
            j = ci[p]
            v = cx[p]
            for c in range(k):
                X[i, c] -= v * X[j, c]
        d = cx[acc_rows]
        for c in range(k):
            X[i, c] /= d


# ---------------------------------------------------------------------------
# sparse products
# ---------------------------------------------------------------------------


@_jit
def spmv_rows(indptr, indices, data, x, out):
    """out = M x for a row-compressed M."""
    for i in range(indptr.shape[0] - 1):
        acc = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            acc += data[p] * x[indices[p]]
        out[i] = acc


@_jit
def spmv_rows_t(indptr, indices, data, x, out):
    """out = M^T x for a row-compressed M (scatter form)."""
    out[:] = 0.0
    for i in range(indptr.shape[0] - 1):
        xi = x[i]
        for p in range(indptr[i], indptr[i + 1]):
            out[indices[p]] += data[p] * xi


@_jit
def spmm_rows(indptr, indices, data, X, Out):
    """Out = M X for a row-compressed M and dense X."""
    k = X.shape[1]
    for i in range(indptr.shape[0] - 1):
        for c in range(k):
            Out[i, c] = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            v = data[p]
            for c in range(k):
                Out[i, c] += v * X[j, c]


@_jit
def spmm_rows_t(indptr, indices, data, X, Out):
    """Out = M^T X for a row-compressed M and dense X."""
    k = X.shape[1]
    Out[:, :] = 0.0
    for i in range(indptr.shape[0] - 1):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            v = data[p]
            for c in range(k):
                Out[j, c] += v * X[i, c]


# ---------------------------------------------------------------------------
# dense helpers
# ---------------------------------------------------------------------------


@_jit
def symv_upper(F, x, out):
    """out = F x reading only the stored upper triangle of symmetric F."""
    n = x.shape[0]
    for i in range(n):
        out[i] = F[i, i] * x[i]
    for i in range(n):
        xi = x[i]
        acc = 0.0
        for j in range(i + 1, n):
            f = F[i, j]
            acc += f * x[j]
            out[j] += f * xi
        out[i] += acc


@_jit
def zero_lower(F):
    """Clear the strictly-lower triangle so only the stored one remains."""
    n = F.shape[0]
    for i in range(1, n):
        for j in range(i):
            F[i, j] = 0.0


@_jit
def densify_transposed(bptr, bind, bval, Z):
    """Z = B^T densely: Z[j, r] = B[r, j] for every stored entry."""
    Z[:, :] = 0.0
    for r in range(bptr.shape[0] - 1):
        for p in range(bptr[r], bptr[r + 1]):
            Z[bind[p], r] = bval[p]
