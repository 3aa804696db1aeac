import numpy as np
import pytest

from tfeti import mesh as mm
from tfeti.sparse import SparseCsr


class TestGenerateMesh:
    def test_1d_counts(self):
        m = mm.generate_mesh(1, 2, "heat")
        assert m.n_nodes == 3
        assert m.elements.shape == (2, 2)

    def test_2d_counts(self):
        m = mm.generate_mesh(2, 2, "heat")
        assert m.n_nodes == 9
        assert m.elements.shape[0] == 8

    def test_3d_kuhn_counts(self):
        m = mm.generate_mesh(3, 1, "heat")
        assert m.n_nodes == 8
        assert m.elements.shape[0] == 6

    @pytest.mark.parametrize("dim,cells", [(1, 3), (2, 3), (3, 2)])
    def test_structured_formulas(self, dim, cells):
        m = mm.generate_mesh(dim, cells, "heat")
        assert m.n_nodes == (cells + 1) ** dim
        expected = {1: cells, 2: 2 * cells**2, 3: 6 * cells**3}[dim]
        assert m.elements.shape[0] == expected

    def test_element_indices_valid(self):
        m = mm.generate_mesh(3, 2, "heat")
        assert m.elements.min() >= 0
        assert m.elements.max() < m.n_nodes

    def test_lexicographic_node_order(self):
        m = mm.generate_mesh(2, 2, "heat")
        # x varies fastest, then y
        order = np.lexsort((m.nodes[:, 0], m.nodes[:, 1]))
        assert np.array_equal(order, np.arange(m.n_nodes))

    def test_determinism_bit_identical(self):
        a = mm.generate_mesh(3, 3, "elasticity")
        b = mm.generate_mesh(3, 3, "elasticity")
        assert np.array_equal(a.nodes, b.nodes)
        assert np.array_equal(a.elements, b.elements)

    def test_positive_tet_volumes(self):
        m = mm.generate_mesh(3, 2, "heat")
        for conn in m.elements:
            pts = m.nodes[conn]
            vol = np.linalg.det(pts[1:] - pts[0]) / 6.0
            assert vol > 0

    def test_invalid_dim(self):
        with pytest.raises(mm.MeshError):
            mm.generate_mesh(4, 2, "heat")

    def test_zero_cells(self):
        with pytest.raises(mm.MeshError):
            mm.generate_mesh(2, 0, "heat")


class TestAssembleSystem:
    def test_1d_two_unit_elements(self):
        # two unit-length segments: assemble on [0,1] with h=1/2 and rescale,
        # or equivalently check against the analytic (1/h) * [[1,-1],[-1,1]]
        m = mm.generate_mesh(1, 2, "heat")
        k = mm.assemble_system(m).stiffness.to_dense()
        h = 0.5
        expected = (1.0 / h) * np.array([[1.0, -1, 0], [-1, 2, -1], [0, -1, 1]])
        assert np.allclose(k, expected, atol=1e-14)

    def test_unit_right_triangle(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        ke, _ = mm.element_stiffness(pts, "heat", 1.0, 2)
        expected = 0.5 * np.array([[2.0, -1, -1], [-1, 1, 0], [-1, 0, 1]])
        assert np.allclose(ke, expected, atol=1e-15)

    @pytest.mark.parametrize("dim,cells", [(1, 4), (2, 3), (3, 2)])
    def test_floating_heat_kernel(self, dim, cells):
        m = mm.generate_mesh(dim, cells, "heat")
        k = mm.assemble_system(m).stiffness.to_dense()
        ones = np.ones(k.shape[0])
        assert np.linalg.norm(k @ ones) <= 1e-12 * np.linalg.norm(k)

    @pytest.mark.parametrize("dim,cells,physics", [(2, 3, "heat"), (2, 2, "elasticity"), (3, 2, "heat")])
    def test_exact_symmetry(self, dim, cells, physics):
        m = mm.generate_mesh(dim, cells, physics)
        k = mm.assemble_system(m).stiffness.to_dense()
        assert np.array_equal(k, k.T)

    @pytest.mark.parametrize(
        "dim,physics,expected",
        [(2, "heat", 1), (3, "heat", 1), (2, "elasticity", 3), (3, "elasticity", 6)],
    )
    def test_floating_kernel_dimension(self, dim, physics, expected):
        cells = 3 if dim == 2 else 2
        m = mm.generate_mesh(dim, cells, physics)
        k = mm.assemble_system(m).stiffness.to_dense()
        assert k.shape[0] <= 300
        rank = np.linalg.matrix_rank(k, tol=1e-8 * np.linalg.norm(k))
        assert k.shape[0] - rank == expected

    def test_degenerate_element(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])  # collinear
        with pytest.raises(mm.DegenerateElementError):
            mm.element_stiffness(pts, "heat", 1.0, 2)

    def test_coefficient_must_be_positive(self):
        m = mm.generate_mesh(2, 2, "heat")
        with pytest.raises(mm.MeshError):
            mm.assemble_system(m, coefficient=0.0)

    def test_load_is_total_measure(self):
        # constant unit body force integrates to the domain measure per component
        m = mm.generate_mesh(2, 3, "heat")
        s = mm.assemble_system(m)
        assert s.load.sum() == pytest.approx(1.0, abs=1e-12)

    def test_elasticity_dofs_per_node(self):
        m = mm.generate_mesh(2, 2, "elasticity")
        s = mm.assemble_system(m)
        assert s.n_dofs == 2 * m.n_nodes


class TestDirichletDofs:
    def test_1d_left_end(self):
        m = mm.generate_mesh(1, 2, "heat")
        assert mm.dirichlet_dofs(m, "left", value=0.0) == [(0, 0.0)]

    def test_2d_edge_heat(self):
        m = mm.generate_mesh(2, 2, "heat")
        dofs = mm.dirichlet_dofs(m, "x=0")
        assert len(dofs) == 3
        assert dofs == sorted(dofs)

    def test_2d_edge_elasticity(self):
        m = mm.generate_mesh(2, 2, "elasticity")
        assert len(mm.dirichlet_dofs(m, "x=0")) == 6

    def test_unknown_face(self):
        m = mm.generate_mesh(2, 2, "heat")
        with pytest.raises(mm.MeshError):
            mm.dirichlet_dofs(m, "diagonal")


class TestSolveDirectReference:
    def test_diagonal(self):
        sys1 = mm.GlobalSystem(SparseCsr.from_dense(np.array([[2.0]])), np.array([4.0]))
        assert mm.solve_direct_reference(sys1) == pytest.approx([2.0])

    def test_hand_eliminated_bar(self):
        # 3-node unit-element bar, u(0) = 0, f = [0, 0, 1]: reduced system
        # [[2,-1],[-1,1]] [u1,u2] = [0,1] gives u = [0, 1, 2]
        k = SparseCsr.from_dense(np.array([[1.0, -1, 0], [-1, 2, -1], [0, -1, 1]]))
        sys_bar = mm.GlobalSystem(k, np.array([0.0, 0.0, 1.0]), ((0, 0.0),))
        u = mm.solve_direct_reference(sys_bar)
        assert np.allclose(u, [0.0, 1.0, 2.0], atol=1e-12)

    def test_2d_heat_residual(self):
        m = mm.generate_mesh(2, 4, "heat")
        s = mm.assemble_system(m, dirichlet=mm.dirichlet_dofs(m, "x=0"))
        u = mm.solve_direct_reference(s)
        k = s.stiffness.to_dense()
        free = np.setdiff1d(np.arange(s.n_dofs), [d for d, _ in s.dirichlet])
        resid = np.linalg.norm((k @ u - s.load)[free])
        assert resid <= 1e-10 * np.linalg.norm(s.load)

    def test_prescribed_values_exact(self):
        m = mm.generate_mesh(2, 3, "heat")
        dir_dofs = mm.dirichlet_dofs(m, "x=0", value=2.5)
        s = mm.assemble_system(m, dirichlet=dir_dofs)
        u = mm.solve_direct_reference(s)
        for d, v in dir_dofs:
            assert u[d] == v

    def test_singular_without_dirichlet(self):
        m = mm.generate_mesh(2, 2, "heat")
        s = mm.assemble_system(m)
        with pytest.raises(mm.SingularSystemError):
            mm.solve_direct_reference(s)
