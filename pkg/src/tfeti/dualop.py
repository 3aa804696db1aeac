"""Per-subdomain dual operator under interchangeable strategies.

The operator F maps dual vectors through B K^+ B^T, assembled additively
from local pieces.  Three strategies share one lifecycle:

* ``implicit``    -- keep only the factor; apply right-to-left through a
                     sparse matvec, two triangular solves, and a second
                     sparse matvec.
* ``explicit``    -- assemble the dense local matrix up front via the TRSM
                     path (two block triangular solves + one sparse-dense
                     product) or the SYRK path (one block solve + a
                     symmetric rank-k update); apply is a symmetric matvec
                     on the stored triangle.
* ``schur_oracle``-- dense elimination of the augmented saddle block; a
                     reference path for testing, capped in size.

Lifecycle: ``prepare`` runs symbolic factorization exactly once and pins
persistent buffers (factor values, permuted gluing matrix, the dense local
operator, dual scratch) in the pool; ``preprocess`` refills numeric factors
and reassembles dense operators per step using pool-backed temporaries;
``apply`` scatters a cluster dual vector, applies every subdomain, and
gathers with a fixed summation order so results are bit-reproducible for
any worker count and staging mode.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import _kernels as _k
from . import sparse as sp
from .decomposition import ClusterLayout, ConstraintSet
from .pool import Pool, PoolCapacityError

STRATEGIES = ("implicit", "explicit", "schur_oracle")
PATHS = ("trsm", "syrk")
STORAGES = ("sparse", "dense")
ORDERS = ("row", "col")
STAGINGS = ("per_subdomain", "cluster_wide")

FLOAT = np.dtype(np.float64).itemsize


class LifecycleError(RuntimeError):
    """Operation called out of the prepare -> preprocess -> apply order."""


class SizeCapError(ValueError):
    """Dense oracle requested beyond its configured size cap."""


@dataclass(frozen=True)
class DualOpConfig:
    """Strategy plus the explicit-assembly parameter grid."""

    strategy: str = "implicit"
    path: str = "trsm"
    forward_storage: str = "sparse"
    backward_storage: str = "sparse"
    forward_order: str = "row"
    backward_order: str = "row"
    rhs_order: str = "row"
    staging: str = "per_subdomain"

    def __post_init__(self):
        checks = (
            ("strategy", STRATEGIES), ("path", PATHS),
            ("forward_storage", STORAGES), ("backward_storage", STORAGES),
            ("forward_order", ORDERS), ("backward_order", ORDERS),
            ("rhs_order", ORDERS), ("staging", STAGINGS),
        )
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **kw) -> "DualOpConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return DualOpConfig(**vals)


def permute_columns(matrix: sp.SparseCsr, iperm: np.ndarray) -> sp.SparseCsr:
    """Reindex columns by a factor permutation, keeping rows sorted."""
    ip, ix, dt = matrix.row_arrays()
    new_ix = iperm[ix]
    indptr = ip.copy()
    indices = np.empty_like(new_ix)
    data = np.empty_like(dt)
    for r in range(matrix.shape[0]):
        s, e = ip[r], ip[r + 1]
        order = np.argsort(new_ix[s:e], kind="stable")
        indices[s:e] = new_ix[s:e][order]
        data[s:e] = dt[s:e][order]
    return sp.SparseCsr(matrix.shape, indptr, indices, data)


class _SubdomainOp:
    """Per-subdomain persistent state (disjoint across workers)."""

    __slots__ = (
        "index", "n", "m", "symbolic", "factor", "btilde", "btilde_perm",
        "gids", "fmat", "p_loc", "q_loc", "work_n", "regions",
        "cluster", "cluster_scatter",
    )

    def __init__(self, index):
        self.index = index
        self.regions = []


class DualOperator:
    """Lifecycle-managed dual operator over one cluster layout.

    Create unprepared, then call :meth:`prepare` once (the module-level
    :func:`prepare` does both).  All persistent and temporary buffers come
    from the pool; ``external_temp_allocs`` counts any managed temporary
    that had to fall back to plain allocation and stays zero when a pool is
    present.
    """

    def __init__(self, matrices, constraints: ConstraintSet, layout: ClusterLayout,
                 config: DualOpConfig, pool: Pool | None = None, workers: int = 1,
                 schur_cap: int = 2000):
        if len(matrices) != len(constraints.per_subdomain):
            raise ValueError("one stiffness matrix per subdomain required")
        self.matrices = list(matrices)
        self.constraints = constraints
        self.layout = layout
        self.config = config
        self.pool = pool
        self.workers = max(1, int(workers))
        self.schur_cap = int(schur_cap)
        self.n_subdomains = len(self.matrices)
        self.n_multipliers = constraints.n_multipliers

        self.prepared = False
        self.step_ready = False
        self.symbolic_count = 0
        self.numeric_count = 0
        self.external_temp_allocs = 0
        self.persistent_bytes = 0

        self._subs: list[_SubdomainOp] = []
        self._cluster_p = []
        self._executor = None

    # -- helpers -------------------------------------------------------------

    def _persistent_array(self, sub: _SubdomainOp, shape):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        nbytes = int(np.prod(shape, dtype=np.int64)) * FLOAT
        if self.pool is not None:
            region = self.pool.acquire(nbytes, blocking=False, tag=f"persistent s{sub.index}")
            sub.regions.append(region)
            arr = region.as_array(np.float64, shape)
        else:
            arr = np.zeros(shape)
        self.persistent_bytes += nbytes
        return arr

    def _temp_group(self, specs):
        """All temporaries of one task as a single pool region.

        ``specs`` is a list of (shape, numpy order) pairs; carving them from
        one acquisition keeps every worker holding at most one live region,
        so blocked workers never hold memory and the pool cannot deadlock.
        Falls back to plain allocation (counted) without a pool.
        """
        counts = [int(np.prod(shape, dtype=np.int64)) for shape, _ in specs]
        if self.pool is None:
            self.external_temp_allocs += 1
            return None, [np.zeros(s, order=o) for s, o in specs]
        region = self.pool.acquire(sum(counts) * FLOAT, tag="temp")
        flat = region.as_array(np.float64, (sum(counts),))
        arrays = []
        off = 0
        for (shape, order), cnt in zip(specs, counts):
            chunk = flat[off:off + cnt]
            if order == "F":
                arrays.append(chunk.reshape(tuple(reversed(shape))).T)
            else:
                arrays.append(chunk.reshape(shape))
            off += cnt
        return region, arrays

    def _map_subdomains(self, fn):
        """Run fn(sub) over all subdomains, preserving index order of results."""
        if self.workers == 1 or self.n_subdomains == 1:
            return [fn(s) for s in self._subs]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.workers,
                                                thread_name_prefix="dualop")
        return list(self._executor.map(fn, self._subs))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- lifecycle -----------------------------------------------------------

    def prepare(self) -> "DualOperator":
        """Symbolic factorization and persistent reservations, exactly once."""
        if self.prepared:
            raise LifecycleError("prepare was already called on this operator")
        cfg = self.config
        explicit_like = cfg.strategy in ("explicit", "schur_oracle")

        def symbolic_work(args):
            i, matrix = args
            return sp.symbolic_factorize(matrix)

        pairs = list(enumerate(self.matrices))
        if self.workers > 1 and len(pairs) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as ex:
                symbolics = list(ex.map(symbolic_work, pairs))
        else:
            symbolics = [symbolic_work(p) for p in pairs]

        if self.pool is None:
            self.pool = Pool(self._default_pool_bytes(symbolics))

        for i, matrix in pairs:
            sub = _SubdomainOp(i)
            sub.n = matrix.shape[0]
            sc = self.constraints.per_subdomain[i]
            sub.m = sc.multiplier_ids.shape[0]
            sub.gids = sc.multiplier_ids
            sub.symbolic = symbolics[i]
            sub.btilde = sc.matrix
            sub.btilde_perm = permute_columns(sc.matrix, sub.symbolic.iperm)
            values = self._persistent_array(sub, sub.symbolic.nnz)
            sub.factor = sp.CholFactor(sub.symbolic, values)
            sub.fmat = self._persistent_array(sub, (sub.m, sub.m)) if explicit_like else None
            sub.p_loc = self._persistent_array(sub, sub.m)
            sub.q_loc = self._persistent_array(sub, sub.m)
            sub.work_n = self._persistent_array(sub, sub.n)
            self._subs.append(sub)

        for cluster in self.layout.clusters:
            nd = cluster.dual_ids.shape[0]
            self._cluster_p.append(np.zeros(nd))
            for s, smap in zip(cluster.subdomain_ids, cluster.scatter):
                self._subs[int(s)].cluster = cluster.index
                self._subs[int(s)].cluster_scatter = smap

        # a blocked temp request can only be served after other workers
        # release theirs, so the pool must fit the persistent set plus the
        # largest single temp block; anything smaller would hang preprocess
        max_temp = max((self._temp_bytes(sub.n, sub.m) for sub in self._subs), default=0)
        if self.persistent_bytes + max_temp > self.pool.capacity:
            raise PoolCapacityError(
                f"pool of {self.pool.capacity} bytes cannot hold "
                f"{self.persistent_bytes} persistent bytes plus a "
                f"{max_temp}-byte assembly workspace"
            )
        self.symbolic_count = self.n_subdomains
        self.prepared = True
        return self

    def _temp_bytes(self, n, m) -> int:
        cfg = self.config
        if cfg.strategy == "explicit":
            need = n * m
            if "dense" in (cfg.forward_storage, cfg.backward_storage):
                need += n * n
            return need * FLOAT
        if cfg.strategy == "schur_oracle":
            return (n * n + n * m) * FLOAT
        return 0

    def _default_pool_bytes(self, symbolics) -> int:
        persistent = 0
        temp = 0
        cfg = self.config
        explicit_like = cfg.strategy in ("explicit", "schur_oracle")
        for i, s in enumerate(symbolics):
            n = s.n
            m = self.constraints.per_subdomain[i].multiplier_ids.shape[0]
            persistent += (s.nnz + 2 * m + n + (m * m if explicit_like else 0)) * FLOAT
            need = 0
            if cfg.strategy == "explicit":
                need = 2 * n * m * FLOAT
                if "dense" in (cfg.forward_storage, cfg.backward_storage):
                    need += n * n * FLOAT
            elif cfg.strategy == "schur_oracle":
                need = (n * n + 2 * n * m) * FLOAT
            temp = max(temp, need)
        return persistent + self.workers * temp + (1 << 20)

    def preprocess(self, matrices=None) -> None:
        """Refresh numeric factors (and dense local operators) for this step."""
        if not self.prepared:
            raise LifecycleError("preprocess before prepare")
        if matrices is not None:
            if len(matrices) != self.n_subdomains:
                raise ValueError("one stiffness matrix per subdomain required")
            self.matrices = list(matrices)

        def work(sub: _SubdomainOp):
            matrix = self.matrices[sub.index]
            try:
                sp.numeric_factorize(sub.symbolic, matrix, out=sub.factor)
            except sp.SpdError as err:
                raise sp.SpdError(f"subdomain {sub.index}: {err}") from err
            if self.config.strategy == "explicit":
                assemble_explicit_local(
                    sub.factor, sub.btilde, self.config,
                    btilde_perm=sub.btilde_perm, out=sub.fmat, state=self,
                )
            elif self.config.strategy == "schur_oracle":
                self._schur_into(sub)
            return 1

        done = self._map_subdomains(work)
        self.numeric_count += int(sum(done))
        self.step_ready = True

    def _schur_into(self, sub: _SubdomainOp):
        matrix = self.matrices[sub.index]
        reg_k, kd = self._temp((sub.n, sub.n))
        reg_bt, bt = self._temp((sub.n, sub.m))
        try:
            matrix.to_dense(out=kd)
            bp, bi, bx = sub.btilde.row_arrays()
            _k.densify_transposed(bp, bi, bx, bt)
            f = schur_complement_oracle(matrix, sub.btilde, cap=self.schur_cap,
                                        dense_stiffness=kd, dense_bt=bt)
            np.copyto(sub.fmat, f)
            _k.zero_lower(sub.fmat)
        finally:
            for r in (reg_bt, reg_k):
                if r is not None:
                    r.release()

    # -- application ---------------------------------------------------------

    def apply(self, p: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """q = sum_i gather_i(F_i scatter_i(p)), summed in subdomain order."""
        if not self.step_ready:
            raise LifecycleError("apply before preprocess for the current values")
        p = np.asarray(p, dtype=np.float64)
        if p.shape != (self.n_multipliers,):
            raise ValueError("dual vector has the wrong length")
        if out is None:
            out = np.zeros(self.n_multipliers)
        else:
            out[:] = 0.0

        cluster_wide = self.config.staging == "cluster_wide"
        if cluster_wide:
            for cluster, buf in zip(self.layout.clusters, self._cluster_p):
                np.take(p, cluster.dual_ids, out=buf)

        def work(sub: _SubdomainOp):
            if cluster_wide:
                np.take(self._cluster_p[sub.cluster], sub.cluster_scatter, out=sub.p_loc)
            else:
                np.take(p, sub.gids, out=sub.p_loc)
            self._apply_local(sub)
            return None

        self._map_subdomains(work)

        # fixed gather order: ascending subdomain index within ascending clusters
        for cluster in self.layout.clusters:
            for s in cluster.subdomain_ids:
                sub = self._subs[int(s)]
                out[sub.gids] += sub.q_loc
        return out

    def _apply_local(self, sub: _SubdomainOp):
        if self.config.strategy == "implicit":
            apply_implicit_local(sub.factor, sub.btilde, sub.p_loc,
                                 btilde_perm=sub.btilde_perm,
                                 work=sub.work_n, out=sub.q_loc)
        else:
            _k.symv_upper(sub.fmat, sub.p_loc, sub.q_loc)

    # -- K^+ access for the solver --------------------------------------------

    def solve_local(self, index: int, rhs, out=None):
        """x = K_reg^-1 rhs for one subdomain through its factor."""
        if not self.step_ready:
            raise LifecycleError("solve_local before preprocess")
        sub = self._subs[index]
        return sub.factor.solve(rhs, out=out, work=sub.work_n)

    def local_operator(self, index: int) -> np.ndarray | None:
        sub = self._subs[index]
        return sub.fmat

    def persistent_addresses(self):
        """Data pointers of every persistent buffer (stability checks)."""
        addrs = []
        for sub in self._subs:
            for arr in (sub.factor.values, sub.p_loc, sub.q_loc, sub.work_n):
                addrs.append(arr.__array_interface__["data"][0])
            if sub.fmat is not None:
                addrs.append(sub.fmat.__array_interface__["data"][0])
        return tuple(addrs)


def prepare(matrices, constraints, layout, config, pool=None, workers=1,
            schur_cap=2000) -> DualOperator:
    """Build and prepare a dual operator (symbolic stage + buffers)."""
    op = DualOperator(matrices, constraints, layout, config, pool=pool,
                      workers=workers, schur_cap=schur_cap)
    return op.prepare()


# ---------------------------------------------------------------------------
# local assembly / application routines
# ---------------------------------------------------------------------------


def assemble_explicit_local(factor: sp.CholFactor, btilde: sp.SparseCsr,
                            config: DualOpConfig, btilde_perm=None,
                            out=None, state: DualOperator | None = None) -> np.ndarray:
    """Dense local dual operator (stored upper triangle) via TRSM or SYRK.

    TRSM path: densify the permuted B^T, run forward and backward block
    solves, then one sparse-dense product.  SYRK path: forward solve only,
    then a symmetric rank-k update.  The factor permutation is fused into
    the densification and cancels in the congruence, so no inverse
    permutation is ever applied.
    """
    m, n = btilde.shape
    if n != factor.n:
        raise ValueError("constraint matrix width does not match the factor")
    if btilde_perm is None:
        btilde_perm = permute_columns(btilde, factor.symbolic.iperm)
    if out is None:
        out = np.zeros((m, m))

    def temp(shape, order="C"):
        if state is not None:
            return state._temp(shape, order)
        return None, np.zeros(shape, order=order)

    rhs_np_order = "C" if config.rhs_order == "row" else "F"
    regions = []
    try:
        reg_z, z = temp((n, m), rhs_np_order)
        regions.append(reg_z)
        bp, bi, bx = btilde_perm.row_arrays()
        _k.densify_transposed(bp, bi, bx, z)

        dense_work = None
        if "dense" in (config.forward_storage, config.backward_storage):
            reg_u, dense_work = temp((n, n), "F")
            regions.append(reg_u)

        w = sp.triangular_solve_multi(
            factor, sp.DenseMat(z, config.rhs_order), transpose=True,
            factor_storage=config.forward_storage, factor_order=config.forward_order,
            rhs_order=config.rhs_order, out=z, dense_factor_work=dense_work,
        ).values

        if config.path == "syrk":
            _syrk_into(w, config.rhs_order, out)
        else:
            y = sp.triangular_solve_multi(
                factor, sp.DenseMat(w, config.rhs_order), transpose=False,
                factor_storage=config.backward_storage, factor_order=config.backward_order,
                rhs_order=config.rhs_order, out=w, dense_factor_work=dense_work,
            ).values
            ip, ix, dt = btilde_perm.row_arrays()
            _k.spmm_rows(ip, ix, dt, y, out)
        _k.zero_lower(out)
        return out
    finally:
        for r in regions:
            if r is not None:
                r.release()


def _syrk_into(w: np.ndarray, rhs_order: str, out: np.ndarray) -> None:
    """out(upper) = W^T W in place through BLAS; no temporaries."""
    from scipy.linalg.blas import dsyrk

    if out.flags.f_contiguous and not out.flags.c_contiguous:
        target, lower = out, 0
    else:
        target, lower = out.T, 1  # upper triangle of out is lower of out.T
    if rhs_order == "col":
        res = dsyrk(1.0, w, c=target, trans=1, lower=lower, overwrite_c=1, beta=0.0)
    else:
        res = dsyrk(1.0, w.T, c=target, trans=0, lower=lower, overwrite_c=1, beta=0.0)
    if not np.shares_memory(res, out):
        np.copyto(target, res)


def apply_implicit_local(factor: sp.CholFactor, btilde: sp.SparseCsr, p_loc,
                         btilde_perm=None, work=None, out=None) -> np.ndarray:
    """q = B (U^-1 (U^-T (B^T p))) with single-column triangular solves."""
    m, n = btilde.shape
    if btilde_perm is None:
        btilde_perm = permute_columns(btilde, factor.symbolic.iperm)
    if work is None:
        work = np.empty(n)
    if out is None:
        out = np.empty(m)
    ip, ix, dt = btilde_perm.row_arrays()
    _k.spmv_rows_t(ip, ix, dt, np.asarray(p_loc, dtype=np.float64), work)
    x = work.reshape(-1, 1)
    s = factor.symbolic
    _k.utsolve_rows(s.up, s.ui, factor.values, x)
    _k.usolve_rows(s.up, s.ui, factor.values, x)
    _k.spmv_rows(ip, ix, dt, work, out)
    return out


def schur_complement_oracle(stiffness_reg: sp.SparseCsr, btilde: sp.SparseCsr,
                            cap: int = 2000, dense_stiffness=None, dense_bt=None) -> np.ndarray:
    """Dense reference for the local dual operator.

    Forms the augmented block matrix [[K_reg, B^T], [B, 0]], eliminates the
    K block densely, and returns the negated Schur complement B K_reg^-1
    B^T.  Independent of the sparse factorization path by construction.
    """
    n = stiffness_reg.shape[0]
    m = btilde.shape[0]
    if n > cap:
        raise SizeCapError(f"subdomain of {n} DOFs exceeds the dense oracle cap {cap}")
    aug = np.zeros((n + m, n + m))
    if dense_stiffness is not None:
        aug[:n, :n] = dense_stiffness
    else:
        stiffness_reg.to_dense(out=aug[:n, :n])
    if dense_bt is not None:
        aug[:n, n:] = dense_bt
    else:
        aug[:n, n:] = btilde.to_dense().T
    aug[n:, :n] = aug[:n, n:].T
    chol = sp.dense_cholesky(aug[:n, :n])
    x = chol.solve(aug[:n, n:])
    schur = aug[n:, n:] - aug[n:, :n] @ x
    return -schur
