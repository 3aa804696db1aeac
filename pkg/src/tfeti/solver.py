"""Dual-problem assembly, projected conjugate gradients and recovery.

Given per-subdomain systems and Total FETI constraints, this module builds
the coarse quantities G = B R, e = R^T f, d = B K^+ f - c, factors the
coarse Gram matrix G^T G densely, and iterates the preconditioned conjugate
projected gradient method on the dual problem.  The primal solution is
recovered from the converged multipliers and the coarse amplitudes.

The iteration starts from the feasible multiplier G (G^T G)^-1 e so the
solvability condition G^T lambda = e holds from the first iterate on; the
projector keeps every search direction in ker G^T.  The stopping test is
the relative projected-residual norm.  The preconditioner is identity by
default; the standard lumped variant (sum of B K B^T) is available too.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dualop as dop
from . import mesh as mm
from . import sparse as sp
from .decomposition import ClusterLayout, ConstraintSet, Partition, build_clusters, build_constraints, partition
from .pool import Pool

PRECONDITIONERS = ("none", "lumped")


class KernelError(ArithmeticError):
    """Constructed kernel basis fails to annihilate the stiffness."""


class DefectiveConstraintsError(ArithmeticError):
    """The coarse Gram matrix is not SPD: constraints are rank-deficient."""


class BreakdownError(ArithmeticError):
    """PCPG met a non-positive curvature: the operator is not PSD."""


class ConvergenceError(RuntimeError):
    """PCPG hit the iteration cap before reaching the tolerance."""


class ResidualError(ArithmeticError):
    """Recovered solution failed its residual checks."""


def build_kernel(physics: str, mesh: mm.Mesh) -> np.ndarray:
    """Orthonormal basis of the floating-subdomain stiffness kernel.

    Heat: the normalized constant.  Elasticity: translations plus the
    infinitesimal rotations, orthonormalized.
    """
    n = mesh.n_dofs
    if physics == "heat":
        basis = np.full((n, 1), 1.0)
    else:
        dim = mesh.dim
        x = mesh.nodes
        cols = []
        for c in range(dim):
            t = np.zeros((mesh.n_nodes, dim))
            t[:, c] = 1.0
            cols.append(t.ravel())
        if dim == 2:
            r = np.zeros((mesh.n_nodes, 2))
            r[:, 0] = -x[:, 1]
            r[:, 1] = x[:, 0]
            cols.append(r.ravel())
        else:
            for (a, b) in ((0, 1), (1, 2), (0, 2)):
                r = np.zeros((mesh.n_nodes, 3))
                r[:, a] = -x[:, b]
                r[:, b] = x[:, a]
                cols.append(r.ravel())
        basis = np.stack(cols, axis=1)
    q, _ = np.linalg.qr(basis)
    # deterministic sign: first significant entry of each column positive
    for j in range(q.shape[1]):
        lead = np.flatnonzero(np.abs(q[:, j]) > 1e-12)
        if lead.size and q[lead[0], j] < 0:
            q[:, j] = -q[:, j]
    return q


def verify_kernel(stiffness: sp.SparseCsr, kernel: np.ndarray, tol: float = 1e-10) -> float:
    dense = stiffness.to_dense()
    norm_k = np.linalg.norm(dense)
    resid = np.linalg.norm(dense @ kernel) / max(norm_k, 1e-300)
    if resid > tol:
        raise KernelError(f"kernel residual {resid:.3e} exceeds {tol:.1e}")
    return resid


@dataclass(eq=False)
class SubdomainProblem:
    """Everything the solver needs about one subdomain."""

    stiffness: sp.SparseCsr        # original singular K_i
    stiffness_reg: sp.SparseCsr
    force: np.ndarray
    kernel: np.ndarray             # orthonormal columns spanning ker K_i


@dataclass(eq=False)
class DualSystem:
    gmat: np.ndarray               # (n_multipliers, total kernel dim)
    e: np.ndarray
    d: np.ndarray
    coarse: sp.DenseCholesky       # of G^T G
    kernel_offsets: np.ndarray     # per-subdomain column ranges in gmat

    def project(self, x: np.ndarray) -> np.ndarray:
        """P x = x - G (G^T G)^-1 G^T x."""
        return x - self.gmat @ self.coarse.solve(self.gmat.T @ x)

    def feasible_start(self) -> np.ndarray:
        return self.gmat @ self.coarse.solve(self.e)


def assemble_dual_system(subproblems, constraints: ConstraintSet,
                         state: dop.DualOperator) -> DualSystem:
    """G = B R column blocks, e = R^T f, d = B K^+ f - c, coarse factor."""
    n_mult = constraints.n_multipliers
    offsets = np.zeros(len(subproblems) + 1, np.int64)
    for i, spb in enumerate(subproblems):
        offsets[i + 1] = offsets[i] + spb.kernel.shape[1]
    gmat = np.zeros((n_mult, int(offsets[-1])))
    e = np.zeros(int(offsets[-1]))
    d = np.zeros(n_mult)
    for i, spb in enumerate(subproblems):
        sc = constraints.per_subdomain[i]
        for j in range(spb.kernel.shape[1]):
            col = sp.sparse_apply(sc.matrix, spb.kernel[:, j])
            gmat[sc.multiplier_ids, offsets[i] + j] = col
        e[offsets[i]:offsets[i + 1]] = spb.kernel.T @ spb.force
        kf = state.solve_local(i, spb.force)
        d[sc.multiplier_ids] += sp.sparse_apply(sc.matrix, kf)
    d -= constraints.c
    try:
        coarse = sp.dense_cholesky(gmat.T @ gmat)
    except sp.SpdError as err:
        raise DefectiveConstraintsError(f"G^T G is not SPD: {err}") from err
    return DualSystem(gmat=gmat, e=e, d=d, coarse=coarse, kernel_offsets=offsets)


def project(dual_system: DualSystem, x: np.ndarray) -> np.ndarray:
    return dual_system.project(x)


def make_preconditioner(kind: str, subproblems=None, constraints: ConstraintSet | None = None):
    """Identity, or the lumped operator sum_i gather_i(B K_i B^T scatter_i(.))."""
    if kind not in PRECONDITIONERS:
        raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}")
    if kind == "none":
        return lambda w: w
    if subproblems is None or constraints is None:
        raise ValueError("lumped preconditioner needs subdomain data")

    mats = [(constraints.per_subdomain[i], spb.stiffness) for i, spb in enumerate(subproblems)]

    def lumped(w):
        out = np.zeros_like(w)
        for sc, k in mats:
            wl = w[sc.multiplier_ids]
            v = sp.sparse_apply(sc.matrix, wl, transpose=True)
            v = sp.sparse_apply(k, v)
            out[sc.multiplier_ids] += sp.sparse_apply(sc.matrix, v)
        return out

    return lumped


def apply_preconditioner(kind: str, w: np.ndarray, subproblems=None,
                         constraints: ConstraintSet | None = None) -> np.ndarray:
    return make_preconditioner(kind, subproblems, constraints)(w)


@dataclass(eq=False)
class PcpgResult:
    lam: np.ndarray
    iterations: int
    converged: bool
    residual_norms: np.ndarray      # ||w_k||, length iterations + 1
    feasibility: np.ndarray         # ||G^T lambda_k - e||, same length
    lambda_history: list = field(default_factory=list)
    apply_seconds: float = 0.0
    apply_count: int = 0


def pcpg(dual_system: DualSystem, state: dop.DualOperator, tol: float = 1e-9,
         maxit: int | None = None, precond: str = "none", subproblems=None,
         constraints: ConstraintSet | None = None,
         record_iterates: bool = False) -> PcpgResult:
    """Preconditioned conjugate projected gradients on the dual problem.

    Follows the textbook recursion: q = F p, step delta = (w't y)/(p' q),
    residual and projected residual updates, conjugation beta from the
    (w, y) inner products.  Breakdown (p' q <= 0) and hitting the cap
    raise; the iterate history is recorded on request.
    """
    ds = dual_system
    n_mult = ds.d.shape[0]
    if maxit is None:
        maxit = n_mult
    mfun = make_preconditioner(precond, subproblems, constraints)

    apply_time = [0.0, 0]
    q = np.zeros(n_mult)

    def fapply(vec):
        t0 = time.perf_counter()
        res = state.apply(vec, out=q)
        apply_time[0] += time.perf_counter() - t0
        apply_time[1] += 1
        return res

    lam = ds.feasible_start()
    r = ds.d - fapply(lam)
    w = ds.project(r)
    y = ds.project(mfun(w))
    p = y.copy()

    wnorms = [float(np.linalg.norm(w))]
    feas = [float(np.linalg.norm(ds.gmat.T @ lam - ds.e))]
    history = [lam.copy()] if record_iterates else []
    wy = float(w @ y)
    w0 = wnorms[0]

    # the projected initial residual can be exactly representable noise when
    # the coarse space covers the whole dual space; a relative test on it
    # would iterate on roundoff forever
    if w0 <= 1e-14 * max(1.0, float(np.linalg.norm(ds.d))):
        return PcpgResult(lam=lam, iterations=0, converged=True,
                          residual_norms=np.array(wnorms), feasibility=np.array(feas),
                          lambda_history=history,
                          apply_seconds=apply_time[0], apply_count=apply_time[1])

    k = 0
    while True:
        qk = fapply(p)
        pq = float(p @ qk)
        if pq <= 0.0:
            raise BreakdownError(f"p^T F p = {pq:.3e} at iteration {k}")
        delta = wy / pq
        lam = lam + delta * p
        r = r - delta * qk
        w = ds.project(r)
        y = ds.project(mfun(w))
        k += 1
        wnorms.append(float(np.linalg.norm(w)))
        feas.append(float(np.linalg.norm(ds.gmat.T @ lam - ds.e)))
        if record_iterates:
            history.append(lam.copy())
        wy_next = float(w @ y)
        if wnorms[-1] <= tol * w0:
            return PcpgResult(lam=lam, iterations=k, converged=True,
                              residual_norms=np.array(wnorms), feasibility=np.array(feas),
                              lambda_history=history,
                              apply_seconds=apply_time[0], apply_count=apply_time[1])
        if k >= maxit:
            raise ConvergenceError(
                f"PCPG did not reach tol {tol:.1e} in {maxit} iterations "
                f"(relative residual {wnorms[-1] / w0:.3e})"
            )
        beta = wy_next / wy
        wy = wy_next
        p = y + beta * p


@dataclass(eq=False)
class Recovery:
    alpha: np.ndarray
    u_local: list
    u_global: np.ndarray
    constraint_residual: float
    equilibrium_residual: float


def recover_solution(lam: np.ndarray, dual_system: DualSystem, subproblems,
                     constraints: ConstraintSet, state: dop.DualOperator,
                     part: Partition | None = None, tol: float = 1e-9,
                     enforce: bool = True) -> Recovery:
    """alpha from the coarse system, then u_i = K^+(f - B^T lam) + R alpha."""
    ds = dual_system
    fl = state.apply(lam)
    alpha = -ds.coarse.solve(ds.gmat.T @ (ds.d - fl))
    bt_lam = constraints.apply_transpose(lam)
    u_local = []
    off = ds.kernel_offsets
    for i, spb in enumerate(subproblems):
        rhs = spb.force - bt_lam[i]
        u = state.solve_local(i, rhs)
        u += spb.kernel @ alpha[off[i]:off[i + 1]]
        u_local.append(u)

    bu = constraints.apply(u_local)
    constraint_residual = float(np.linalg.norm(bu - constraints.c))
    equihi = 0.0
    fnorm = 0.0
    for i, spb in enumerate(subproblems):
        res = sp.sparse_apply(spb.stiffness, u_local[i]) + bt_lam[i] - spb.force
        equihi += float(res @ res)
        fnorm += float(spb.force @ spb.force)
    equilibrium_residual = float(np.sqrt(equihi))
    fnorm = float(np.sqrt(fnorm))

    if enforce:
        limit_c = 10.0 * tol * max(1.0, float(np.linalg.norm(constraints.c)))
        limit_f = 10.0 * tol * max(1.0, fnorm)
        if constraint_residual > limit_c:
            raise ResidualError(f"||Bu - c|| = {constraint_residual:.3e} > {limit_c:.3e}")
        if equilibrium_residual > limit_f:
            raise ResidualError(f"||Ku + B^T lam - f|| = {equilibrium_residual:.3e} > {limit_f:.3e}")

    u_global = None
    if part is not None:
        u_global = np.zeros(part.n_dofs_global)
        counts = np.zeros(part.n_dofs_global)
        for sub, u in zip(part.subdomains, u_local):
            u_global[sub.dof_l2g] += u
            counts[sub.dof_l2g] += 1.0
        u_global /= counts
    return Recovery(alpha=alpha, u_local=u_local, u_global=u_global,
                    constraint_residual=constraint_residual,
                    equilibrium_residual=equilibrium_residual)


# ---------------------------------------------------------------------------
# problem bundle and the multi-step driver
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Problem:
    physics: str
    dim: int
    coefficient: float
    mesh: mm.Mesh
    system: mm.GlobalSystem
    dirichlet: list
    part: Partition
    constraints: ConstraintSet
    layout: ClusterLayout

    @property
    def n_subdomains(self) -> int:
        return self.part.n_subdomains

    @property
    def dofs_per_subdomain(self) -> int:
        return self.part.subdomains[0].mesh.n_dofs

    def subdomain_problems(self, coefficient=None):
        """Assemble per-subdomain systems at a given material coefficient."""
        coef = self.coefficient if coefficient is None else float(coefficient)
        subproblems = []
        for sub in self.part.subdomains:
            sysl = mm.assemble_system(sub.mesh, coefficient=coef)
            kernel = build_kernel(self.physics, sub.mesh)
            verify_kernel(sysl.stiffness, kernel)
            kreg = sp.regularize(sysl.stiffness, kernel)
            subproblems.append(SubdomainProblem(
                stiffness=sysl.stiffness, stiffness_reg=kreg,
                force=sysl.load, kernel=kernel,
            ))
        return subproblems


def build_problem(physics: str, dim: int, cells_per_subdomain: int,
                  subdomains_per_side: int, n_clusters: int = 1,
                  coefficient: float = 1.0, dirichlet_face="x=0") -> Problem:
    """Unit-domain benchmark problem cut into a regular subdomain grid."""
    cells = cells_per_subdomain * subdomains_per_side
    mesh = mm.generate_mesh(dim, cells, physics)
    dirichlet = mm.dirichlet_dofs(mesh, dirichlet_face)
    system = mm.assemble_system(mesh, coefficient=coefficient, dirichlet=dirichlet)
    part = partition(mesh, subdomains_per_side)
    constraints = build_constraints(part, dirichlet)
    layout = build_clusters(part, constraints, n_clusters)
    return Problem(physics=physics, dim=dim, coefficient=coefficient, mesh=mesh,
                   system=system, dirichlet=dirichlet, part=part,
                   constraints=constraints, layout=layout)


@dataclass(eq=False)
class StepReport:
    step: int
    t_preprocess: float
    t_apply_mean: float
    iterations: int
    residual: float
    u_norm: float
    lam_norm: float
    lam: np.ndarray
    u_global: np.ndarray
    counters: tuple = (0, 0)    # (symbolic, numeric) factorizations so far


def run_steps(problem: Problem, n_steps: int, coefficient_schedule=None,
              config: dop.DualOpConfig | None = None, tol: float = 1e-9,
              maxit: int | None = None, precond: str = "none",
              pool: Pool | None = None, workers: int = 1) -> list:
    """Multi-step driver: prepare once, then preprocess/solve/recover per step.

    The symbolic stage runs exactly once; every step refills numeric values
    over the frozen pattern (the schedule scales the material coefficient,
    which preserves it).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if coefficient_schedule is None:
        coefficient_schedule = [1.0] * n_steps
    if len(coefficient_schedule) != n_steps:
        raise ValueError("schedule length must equal n_steps")
    config = config or dop.DualOpConfig()

    subproblems = problem.subdomain_problems(coefficient_schedule[0] * problem.coefficient)
    reports = []
    with dop.prepare([s.stiffness_reg for s in subproblems], problem.constraints,
                     problem.layout, config, pool=pool, workers=workers) as state:
        for step in range(n_steps):
            if step > 0:
                subproblems = problem.subdomain_problems(
                    coefficient_schedule[step] * problem.coefficient)
            t0 = time.perf_counter()
            state.preprocess([s.stiffness_reg for s in subproblems])
            t_pre = time.perf_counter() - t0

            ds = assemble_dual_system(subproblems, problem.constraints, state)
            result = pcpg(ds, state, tol=tol, maxit=maxit, precond=precond,
                          subproblems=subproblems, constraints=problem.constraints)
            rec = recover_solution(result.lam, ds, subproblems, problem.constraints,
                                   state, part=problem.part, tol=tol)
            mean_apply = result.apply_seconds / max(result.apply_count, 1)
            reports.append(StepReport(
                step=step, t_preprocess=t_pre, t_apply_mean=mean_apply,
                iterations=result.iterations,
                residual=float(result.residual_norms[-1] / max(result.residual_norms[0], 1e-300)),
                u_norm=float(np.linalg.norm(rec.u_global)),
                lam_norm=float(np.linalg.norm(result.lam)),
                lam=result.lam, u_global=rec.u_global,
                counters=(state.symbolic_count, state.numeric_count),
            ))
    return reports
