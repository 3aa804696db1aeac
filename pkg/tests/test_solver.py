import numpy as np
import pytest

from tfeti import decomposition as dc
from tfeti import dualop as dop
from tfeti import mesh as mm
from tfeti import solver as sl
from tfeti import sparse as sp


@pytest.fixture(scope="module")
def bar_problem():
    """1D bar, two subdomains of two cells, Dirichlet at the left end."""
    mesh = mm.generate_mesh(1, 4, "heat")
    dirichlet = mm.dirichlet_dofs(mesh, "left")
    part = dc.partition(mesh, 2)
    cons = dc.build_constraints(part, dirichlet)
    lay = dc.build_clusters(part, cons, 1)
    prob = sl.Problem(physics="heat", dim=1, coefficient=1.0, mesh=mesh,
                      system=mm.assemble_system(mesh, dirichlet=dirichlet),
                      dirichlet=dirichlet, part=part, constraints=cons, layout=lay)
    return prob


@pytest.fixture(scope="module")
def heat_problem():
    return sl.build_problem("heat", 2, 4, 2)


def dense_primal_saddle(subproblems, constraints):
    """Dense solve of the blocked saddle system [[K, B^T], [B, 0]]."""
    sizes = [spb.stiffness.shape[0] for spb in subproblems]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    n = int(offs[-1])
    m = constraints.n_multipliers
    big = np.zeros((n + m, n + m))
    rhs = np.zeros(n + m)
    for i, spb in enumerate(subproblems):
        big[offs[i]:offs[i + 1], offs[i]:offs[i + 1]] = spb.stiffness.to_dense()
        rhs[offs[i]:offs[i + 1]] = spb.force
        sc = constraints.per_subdomain[i]
        bd = np.zeros((m, sizes[i]))
        bd[sc.multiplier_ids] = sc.matrix.to_dense()
        big[n:, offs[i]:offs[i + 1]] = bd
        big[offs[i]:offs[i + 1], n:] = bd.T
    rhs[n:] = constraints.c
    sol = np.linalg.solve(big, rhs)
    us = [sol[offs[i]:offs[i + 1]] for i in range(len(subproblems))]
    return us, sol[n:]


@pytest.fixture(scope="module")
def heat_dual_system(heat_problem):
    prob = heat_problem
    subproblems = prob.subdomain_problems()
    with dop.prepare([s.stiffness_reg for s in subproblems], prob.constraints,
                     prob.layout, dop.DualOpConfig()) as state:
        state.preprocess()
        return sl.assemble_dual_system(subproblems, prob.constraints, state)


class TestBuildKernel:
    def test_heat_constant(self):
        mesh = mm.generate_mesh(1, 3, "heat")
        r = sl.build_kernel("heat", mesh)
        assert r.shape == (4, 1)
        assert np.allclose(r, 0.5, atol=1e-15)  # normalized constant, 4 DOFs

    def test_2d_elasticity_three_modes(self):
        mesh = mm.generate_mesh(2, 2, "elasticity")
        r = sl.build_kernel("elasticity", mesh)
        assert r.shape[1] == 3
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)

    def test_3d_elasticity_six_modes(self):
        mesh = mm.generate_mesh(3, 2, "elasticity")
        r = sl.build_kernel("elasticity", mesh)
        assert r.shape[1] == 6
        assert np.allclose(r.T @ r, np.eye(6), atol=1e-12)

    @pytest.mark.parametrize("physics,dim,cells", [
        ("heat", 2, 3), ("heat", 3, 2), ("elasticity", 2, 3), ("elasticity", 3, 2),
    ])
    def test_kernel_annihilates_stiffness(self, physics, dim, cells):
        mesh = mm.generate_mesh(dim, cells, physics)
        k = mm.assemble_system(mesh).stiffness
        r = sl.build_kernel(physics, mesh)
        assert sl.verify_kernel(k, r) <= 1e-10

    def test_verify_kernel_raises_on_garbage(self):
        mesh = mm.generate_mesh(2, 2, "heat")
        k = mm.assemble_system(mesh).stiffness
        bad = np.zeros((k.shape[0], 1))
        bad[0, 0] = 1.0
        with pytest.raises(sl.KernelError):
            sl.verify_kernel(k, bad)


class TestAssembleDualSystem:
    def test_shapes_and_zero_force(self, heat_problem):
        prob = heat_problem
        subproblems = prob.subdomain_problems()
        for spb in subproblems:
            spb.force = np.zeros_like(spb.force)
        with dop.prepare([s.stiffness_reg for s in subproblems], prob.constraints,
                         prob.layout, dop.DualOpConfig()) as state:
            state.preprocess()
            ds = sl.assemble_dual_system(subproblems, prob.constraints, state)
            total_kernel = sum(s.kernel.shape[1] for s in subproblems)
            assert ds.gmat.shape == (prob.constraints.n_multipliers, total_kernel)
            assert np.array_equal(ds.e, np.zeros(total_kernel))

    def test_defective_constraints_rejected(self):
        # an unconstrained floating subdomain leaves a zero column in G,
        # making the coarse Gram matrix singular
        prob = sl.build_problem("heat", 2, 2, 2)
        subproblems = prob.subdomain_problems()
        crippled = dc.ConstraintSet(
            n_multipliers=prob.constraints.n_multipliers,
            c=prob.constraints.c,
            kinds=prob.constraints.kinds,
            per_subdomain=list(prob.constraints.per_subdomain),
        )
        sc0 = crippled.per_subdomain[0]
        empty = sp.SparseCsr((0, sc0.matrix.shape[1]), np.zeros(1, np.int64),
                             np.empty(0, np.int64), np.empty(0))
        crippled.per_subdomain[0] = dc.SubdomainConstraints(np.empty(0, np.int64), empty)
        with dop.prepare([s.stiffness_reg for s in subproblems], crippled,
                         prob.layout, dop.DualOpConfig()) as state:
            state.preprocess()
            with pytest.raises(sl.DefectiveConstraintsError):
                sl.assemble_dual_system(subproblems, crippled, state)

    def test_primal_saddle_oracle_satisfies_coarse_condition(self, bar_problem):
        # independent route: lambda from the dense blocked saddle system
        # fulfils G^T lambda = e
        prob = bar_problem
        subproblems = prob.subdomain_problems()
        us, lam = dense_primal_saddle(subproblems, prob.constraints)
        with dop.prepare([s.stiffness_reg for s in subproblems], prob.constraints,
                         prob.layout, dop.DualOpConfig()) as state:
            state.preprocess()
            ds = sl.assemble_dual_system(subproblems, prob.constraints, state)
        resid = np.linalg.norm(ds.gmat.T @ lam - ds.e)
        assert resid <= 1e-10 * max(1.0, np.linalg.norm(ds.e))


class TestProjector:
    def test_range_annihilation(self, heat_dual_system):
        dual_system = heat_dual_system
        rng = np.random.default_rng(0)
        y = rng.normal(size=dual_system.gmat.shape[1])
        gy = dual_system.gmat @ y
        assert np.linalg.norm(dual_system.project(gy)) <= 1e-12 * np.linalg.norm(gy)

    def test_single_column_formula(self):
        g = np.zeros((5, 1))
        g[2, 0] = 1.0
        ds = sl.DualSystem(gmat=g, e=np.zeros(1), d=np.zeros(5),
                           coarse=sp.dense_cholesky(g.T @ g),
                           kernel_offsets=np.array([0, 1]))
        rng = np.random.default_rng(1)
        x = rng.normal(size=5)
        expected = x - g[:, 0] * (g[:, 0] @ x)
        assert np.allclose(ds.project(x), expected, atol=1e-14)

    def test_idempotence(self, heat_dual_system):
        dual_system = heat_dual_system
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.normal(size=dual_system.gmat.shape[0])
            px = dual_system.project(x)
            assert np.linalg.norm(dual_system.project(px) - px) <= 1e-12 * max(np.linalg.norm(x), 1.0)


class TestPreconditioner:
    def test_none_is_identity(self):
        w = np.arange(4.0)
        assert sl.apply_preconditioner("none", w) is w

    def test_lumped_identity_stiffness(self):
        b = sp.SparseCsr.from_dense(np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0]]))
        cons = dc.ConstraintSet(
            n_multipliers=2, c=np.zeros(2), kinds=np.array([dc.GLUING] * 2),
            per_subdomain=[dc.SubdomainConstraints(np.array([0, 1]), b)],
        )
        spb = sl.SubdomainProblem(stiffness=sp.SparseCsr.identity(3),
                                  stiffness_reg=sp.SparseCsr.identity(3),
                                  force=np.zeros(3), kernel=np.zeros((3, 0)))
        w = np.array([1.0, 2.0])
        got = sl.apply_preconditioner("lumped", w, [spb], cons)
        bd = b.to_dense()
        assert np.allclose(got, bd @ bd.T @ w, atol=1e-14)

    def test_lumped_psd(self, heat_problem):
        prob = heat_problem
        subproblems = prob.subdomain_problems()
        lumped = sl.make_preconditioner("lumped", subproblems, prob.constraints)
        rng = np.random.default_rng(3)
        for _ in range(10):
            w = rng.normal(size=prob.constraints.n_multipliers)
            assert w @ lumped(w) >= -1e-12

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            sl.make_preconditioner("dirichlet")


class TestPcpg:
    def make_state(self, prob, cfg=None):
        subproblems = prob.subdomain_problems()
        state = dop.prepare([s.stiffness_reg for s in subproblems], prob.constraints,
                            prob.layout, cfg or dop.DualOpConfig())
        state.preprocess()
        ds = sl.assemble_dual_system(subproblems, prob.constraints, state)
        return subproblems, state, ds

    def test_zero_projected_residual_stops_immediately(self, bar_problem):
        subproblems, state, ds = self.make_state(bar_problem)
        # make d = F lambda_I exactly: replace d by the operator applied to the start
        lam_i = ds.feasible_start()
        ds.d = state.apply(lam_i).copy()
        res = sl.pcpg(ds, state, tol=1e-9)
        state.close()
        assert res.iterations == 0
        assert res.residual_norms.shape == (1,)

    def test_bar_matches_dual_saddle_oracle(self, bar_problem):
        # dense saddle-point oracle on the dual problem
        subproblems, state, ds = self.make_state(bar_problem)
        m = ds.d.shape[0]
        f_dense = np.zeros((m, m))
        for i, spb in enumerate(subproblems):
            sc = bar_problem.constraints.per_subdomain[i]
            f_loc = dop.schur_complement_oracle(spb.stiffness_reg, sc.matrix)
            f_dense[np.ix_(sc.multiplier_ids, sc.multiplier_ids)] += f_loc
        r = ds.e.shape[0]
        big = np.zeros((m + r, m + r))
        big[:m, :m] = f_dense
        big[:m, m:] = -ds.gmat
        big[m:, :m] = -ds.gmat.T
        rhs = np.concatenate([ds.d, -ds.e])
        sol = np.linalg.solve(big, rhs)
        lam_oracle = sol[:m]
        res = sl.pcpg(ds, state, tol=1e-12)
        state.close()
        assert np.linalg.norm(res.lam - lam_oracle) <= 1e-8 * max(1.0, np.linalg.norm(lam_oracle))

    def test_bar_matches_primal_saddle_oracle(self, bar_problem):
        subproblems, state, ds = self.make_state(bar_problem)
        _, lam_oracle = dense_primal_saddle(subproblems, bar_problem.constraints)
        res = sl.pcpg(ds, state, tol=1e-12)
        state.close()
        assert np.linalg.norm(res.lam - lam_oracle) <= 1e-8 * max(1.0, np.linalg.norm(lam_oracle))

    def test_finite_termination(self, heat_problem):
        subproblems, state, ds = self.make_state(heat_problem)
        res = sl.pcpg(ds, state, tol=1e-9)
        state.close()
        assert res.converged
        assert res.iterations <= heat_problem.constraints.n_multipliers

    def test_feasibility_invariant(self, heat_problem):
        subproblems, state, ds = self.make_state(heat_problem)
        res = sl.pcpg(ds, state, tol=1e-9)
        state.close()
        bound = 1e-10 * max(1.0, np.linalg.norm(ds.e))
        assert res.feasibility.max() <= bound
        assert res.residual_norms.shape == (res.iterations + 1,)

    def test_residual_trend_soft_check(self, heat_problem):
        # soft check: conjugate gradients minimizes the energy norm, so the
        # projected-residual 2-norm may wiggle; warn on local increases but
        # require an overall decay and boundedness by the start
        import warnings

        subproblems, state, ds = self.make_state(heat_problem)
        res = sl.pcpg(ds, state, tol=1e-9)
        state.close()
        h = res.residual_norms
        assert np.all(h[1:] <= h[0])
        assert h[-1] <= 1e-9 * h[0]
        if np.any(np.diff(h) > 0):
            warnings.warn("projected residual history is not strictly monotone "
                          "(soft check)", stacklevel=1)

    def test_lumped_preconditioner_converges(self, heat_problem):
        subproblems, state, ds = self.make_state(heat_problem)
        res = sl.pcpg(ds, state, tol=1e-9, precond="lumped",
                      subproblems=subproblems, constraints=heat_problem.constraints)
        state.close()
        assert res.converged

    def test_maxit_raises(self, heat_problem):
        subproblems, state, ds = self.make_state(heat_problem)
        with pytest.raises(sl.ConvergenceError):
            sl.pcpg(ds, state, tol=1e-14, maxit=2)
        state.close()

    def test_breakdown_on_non_psd_operator(self, heat_problem):
        # a sign-flipped operator produces p^T q < 0 on the first iteration
        subproblems, state, ds = self.make_state(heat_problem)

        class Negated:
            def apply(self, p, out=None):
                q = state.apply(p, out=out)
                q *= -1.0
                return q

        with pytest.raises(sl.BreakdownError):
            sl.pcpg(ds, Negated(), tol=1e-9)
        state.close()

    def test_iterate_recording(self, heat_problem):
        subproblems, state, ds = self.make_state(heat_problem)
        res = sl.pcpg(ds, state, tol=1e-9, record_iterates=True)
        state.close()
        assert len(res.lambda_history) == res.iterations + 1


class TestRecoverSolution:
    def test_unconstrained_nonsingular_system(self):
        # no constraints, SPD K: u = K^-1 f and alpha is empty
        k = sp.SparseCsr.from_dense(np.array([[4.0, 1.0], [1.0, 3.0]]))
        f = np.array([1.0, 2.0])
        cons = dc.ConstraintSet(
            n_multipliers=0, c=np.zeros(0), kinds=np.array([], dtype=object),
            per_subdomain=[dc.SubdomainConstraints(
                np.empty(0, np.int64),
                sp.SparseCsr((0, 2), np.zeros(1, np.int64), np.empty(0, np.int64), np.empty(0)))],
        )
        from tfeti.decomposition import Cluster, ClusterLayout
        lay = ClusterLayout(clusters=[Cluster(0, np.array([0]), np.empty(0, np.int64),
                                              [np.empty(0, np.int64)])], n_multipliers=0)
        spb = sl.SubdomainProblem(stiffness=k, stiffness_reg=k, force=f,
                                  kernel=np.zeros((2, 0)))
        with dop.prepare([k], cons, lay, dop.DualOpConfig()) as state:
            state.preprocess()
            ds = sl.DualSystem(gmat=np.zeros((0, 0)), e=np.zeros(0), d=np.zeros(0),
                               coarse=sp.dense_cholesky(np.zeros((0, 0)) + np.eye(0)),
                               kernel_offsets=np.array([0, 0]))
            rec = sl.recover_solution(np.zeros(0), ds, [spb], cons, state, tol=1e-9)
        assert rec.alpha.shape == (0,)
        assert np.linalg.norm(k.to_dense() @ rec.u_local[0] - f) <= 1e-12 * np.linalg.norm(f)

    def test_recovered_u_matches_primal_saddle(self, bar_problem):
        subproblems = bar_problem.subdomain_problems()
        us_oracle, _ = dense_primal_saddle(subproblems, bar_problem.constraints)
        with dop.prepare([s.stiffness_reg for s in subproblems], bar_problem.constraints,
                         bar_problem.layout, dop.DualOpConfig()) as state:
            state.preprocess()
            ds = sl.assemble_dual_system(subproblems, bar_problem.constraints, state)
            res = sl.pcpg(ds, state, tol=1e-12)
            rec = sl.recover_solution(res.lam, ds, subproblems, bar_problem.constraints,
                                      state, part=bar_problem.part, tol=1e-12)
        for u_got, u_ref in zip(rec.u_local, us_oracle):
            assert np.linalg.norm(u_got - u_ref) <= 1e-8 * max(1.0, np.linalg.norm(u_ref))

    def test_interface_continuity(self, heat_problem):
        prob = heat_problem
        subproblems = prob.subdomain_problems()
        with dop.prepare([s.stiffness_reg for s in subproblems], prob.constraints,
                         prob.layout, dop.DualOpConfig()) as state:
            state.preprocess()
            ds = sl.assemble_dual_system(subproblems, prob.constraints, state)
            res = sl.pcpg(ds, state, tol=1e-10)
            rec = sl.recover_solution(res.lam, ds, subproblems, prob.constraints,
                                      state, part=prob.part, tol=1e-10)
        owners = prob.part.dof_owners()
        for dof, own in enumerate(owners):
            if len(own) < 2:
                continue
            vals = [rec.u_local[s][loc] for s, loc in own]
            assert max(vals) - min(vals) <= 1e-8 * max(1.0, abs(vals[0]))

    def test_residual_enforcement(self, heat_problem):
        prob = heat_problem
        subproblems = prob.subdomain_problems()
        with dop.prepare([s.stiffness_reg for s in subproblems], prob.constraints,
                         prob.layout, dop.DualOpConfig()) as state:
            state.preprocess()
            ds = sl.assemble_dual_system(subproblems, prob.constraints, state)
            res = sl.pcpg(ds, state, tol=1e-10)
            with pytest.raises(sl.ResidualError):
                sl.recover_solution(res.lam + 1.0, ds, subproblems, prob.constraints,
                                    state, tol=1e-10)


class TestRunSteps:
    def test_matches_direct_oracle(self, heat_problem):
        rep = sl.run_steps(heat_problem, 1, tol=1e-9)[0]
        u_ref = mm.solve_direct_reference(heat_problem.system)
        assert np.linalg.norm(rep.u_global - u_ref) <= 1e-6 * np.linalg.norm(u_ref)

    def test_zero_perturbation_bit_identical(self, heat_problem):
        reports = sl.run_steps(heat_problem, 2)
        assert np.array_equal(reports[0].lam, reports[1].lam)

    def test_lifecycle_counters(self, heat_problem):
        reports = sl.run_steps(heat_problem, 3)
        n = heat_problem.n_subdomains
        assert reports[-1].counters == (n, 3 * n)
        assert reports[0].counters == (n, n)

    def test_scaled_coefficients_pass_residual_checks(self, heat_problem):
        reports = sl.run_steps(heat_problem, 3, coefficient_schedule=[1.0, 2.0, 4.0])
        for rep, coef in zip(reports, [1.0, 2.0, 4.0]):
            sys_c = mm.assemble_system(heat_problem.mesh, coefficient=coef,
                                       dirichlet=heat_problem.dirichlet)
            u_ref = mm.solve_direct_reference(sys_c)
            assert np.linalg.norm(rep.u_global - u_ref) <= 1e-6 * np.linalg.norm(u_ref)

    def test_3d_elasticity_matches_direct_oracle(self):
        prob = sl.build_problem("elasticity", 3, 2, 2)
        rep = sl.run_steps(prob, 1, tol=1e-9)[0]
        u_ref = mm.solve_direct_reference(prob.system)
        assert np.linalg.norm(rep.u_global - u_ref) <= 1e-6 * np.linalg.norm(u_ref)

    def test_strategy_invariant_iteration_counts(self, heat_problem):
        iters = {}
        for strat in ("implicit", "explicit"):
            rep = sl.run_steps(heat_problem, 1, config=dop.DualOpConfig(strategy=strat))[0]
            iters[strat] = rep.iterations
        assert iters["implicit"] == iters["explicit"]

    def test_bad_schedule_length(self, heat_problem):
        with pytest.raises(ValueError):
            sl.run_steps(heat_problem, 2, coefficient_schedule=[1.0])
