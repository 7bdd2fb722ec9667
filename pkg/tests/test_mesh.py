import math

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from srd_chance import mesh
from srd_chance.errors import DefinitenessError, GridMismatchError, InvalidGridError


def _enumerate_free(n, problem):
    free = []
    for j in range(n):
        for i in range(n):
            interior = 0 < i < n - 1 and 0 < j < n - 1
            neumann = problem == mesh.LINEAR_NEUMANN and i == 0 and 0 < j < n - 1
            if interior or neumann:
                free.append(j * n + i)
    return np.array(free)


class TestGrid:
    def test_smallest_dirichlet_grid(self):
        g = mesh.build_grid(3, mesh.BILINEAR_DIRICHLET)
        assert g.num_nodes == 9
        assert np.sum(g.tags == mesh.DIRICHLET) == 8
        assert np.sum(g.tags == mesh.INTERIOR) == 1
        assert g.M == 1

    def test_constraint_count_equals_free_nodes(self):
        g = mesh.build_grid(128, mesh.LINEAR_NEUMANN)
        assert g.M == g.num_free == 127 * 126

    def test_stride_two_by_enumeration(self):
        g = mesh.build_grid(5, mesh.LINEAR_NEUMANN, constraint_stride=2)
        free = _enumerate_free(5, mesh.LINEAR_NEUMANN)
        np.testing.assert_array_equal(g.free, free)
        np.testing.assert_array_equal(g.constraint_points, free[::2])
        assert g.M == 6

    def test_neumann_edge_excludes_corners(self):
        g = mesh.build_grid(6, mesh.LINEAR_NEUMANN)
        nodes = g.neumann_nodes
        np.testing.assert_array_equal(nodes, np.arange(1, 5) * 6)
        assert g.tags[0] == mesh.DIRICHLET and g.tags[30] == mesh.DIRICHLET

    @pytest.mark.parametrize("n", [2, 1, 0, -3, 2.5])
    def test_too_small(self, n):
        with pytest.raises(InvalidGridError):
            mesh.build_grid(n)

    def test_bad_stride_and_kind(self):
        with pytest.raises(InvalidGridError):
            mesh.build_grid(5, constraint_stride=0)
        with pytest.raises(InvalidGridError):
            mesh.build_grid(5, problem="periodic")

    @given(n=st.integers(3, 20), stride=st.integers(1, 5),
           kind=st.sampled_from([mesh.LINEAR_NEUMANN, mesh.BILINEAR_DIRICHLET]))
    def test_free_nodes_match_enumeration(self, n, stride, kind):
        g = mesh.build_grid(n, kind, stride)
        free = _enumerate_free(n, kind)
        np.testing.assert_array_equal(g.free, free)
        np.testing.assert_array_equal(g.constraint_points, free[::stride])
        np.testing.assert_array_equal(g.free_index[g.free], np.arange(free.size))

    def test_extend_restrict_roundtrip(self):
        g = mesh.build_grid(7)
        v = np.arange(g.num_free, dtype=float)
        full = g.extend(v)
        np.testing.assert_array_equal(g.restrict(full), v)
        assert np.all(full[g.tags == mesh.DIRICHLET] == 0)


class TestLaplacian:
    def test_constant_in_kernel_of_interior_stencil(self):
        g = mesh.build_grid(3, mesh.BILINEAR_DIRICHLET)
        A = mesh.assemble_laplacian_mixed(g)
        # a single interior node: stencil applied to the constant 1 field
        # the four eliminated neighbours carry -1/h^2 each
        assert A.matrix[0, 0] - 4.0 / g.h ** 2 == 0.0

    @given(n=st.integers(3, 24), kind=st.sampled_from([mesh.LINEAR_NEUMANN, mesh.BILINEAR_DIRICHLET]))
    @settings(max_examples=25)
    def test_symmetric_and_spd(self, n, kind):
        A = mesh.assemble_laplacian_mixed(mesh.build_grid(n, kind)).matrix
        assert (A != A.T).nnz == 0
        mesh.factorize(A)

    def test_interior_rows_sum_to_zero(self):
        g = mesh.build_grid(9, mesh.LINEAR_NEUMANN)
        A = mesh.assemble_laplacian_mixed(g).matrix
        i, j = g.free % g.n, g.free // g.n
        away = (i >= 2) & (i <= g.n - 3) & (j >= 2) & (j <= g.n - 3)
        np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel()[away], 0.0, atol=1e-9)
        # Neumann rows away from the corners also sum to zero
        neu = (g.tags[g.free] == mesh.NEUMANN) & (j >= 2) & (j <= g.n - 3)
        np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel()[neu], 0.0, atol=1e-9)

    @staticmethod
    def _orders(errors):
        e = np.asarray(errors)
        return np.log2(e[:-1] / e[1:])

    def test_dirichlet_manufactured_second_order(self):
        errs = []
        for n in (17, 33, 65, 129):
            g = mesh.build_grid(n, mesh.BILINEAR_DIRICHLET)
            A = mesh.assemble_laplacian_mixed(g)
            exact = g.restrict(g.field(lambda a, b: np.sin(np.pi * a) * np.sin(np.pi * b)))
            y = mesh.solve(mesh.factorize(A), 2 * np.pi ** 2 * exact)
            errs.append(np.abs(y - exact).max())
        orders = self._orders(errs)
        assert np.all((orders >= 1.8) & (orders <= 2.2)), orders

    def test_mixed_manufactured_second_order(self):
        # y = (e^{x1} - e) sin(pi x2): zero on the Dirichlet edges, outward flux -sin(pi x2) on x1 = 0
        errs = []
        for n in (17, 33, 65, 129):
            g = mesh.build_grid(n, mesh.LINEAR_NEUMANN)
            exact_fn = lambda a, b: (np.exp(a) - np.e) * np.sin(np.pi * b)
            rhs_fn = lambda a, b: (-np.exp(a) + np.pi ** 2 * (np.exp(a) - np.e)) * np.sin(np.pi * b)
            exact = g.restrict(g.field(exact_fn))
            f = g.restrict(g.field(rhs_fn))
            flux = -np.sin(np.pi * g.x2[g.neumann_nodes])
            rhs = mesh.rhs_weights(g) * f + mesh.boundary_injection(g, flux)
            y = mesh.solve(mesh.factorize(mesh.assemble_laplacian_mixed(g)), rhs)
            errs.append(np.abs(y - exact).max())
        orders = self._orders(errs)
        assert np.all((orders >= 1.8) & (orders <= 2.2)), orders

    def test_point_load_matches_dense_solve(self):
        g = mesh.build_grid(16, mesh.BILINEAR_DIRICHLET)
        A = mesh.assemble_laplacian_mixed(g)
        load = np.zeros(g.num_free)
        load[g.free_index[8 * 16 + 8]] = 1.0
        y = mesh.solve(mesh.factorize(A), load)
        ref = np.linalg.solve(A.matrix.toarray(), load)
        np.testing.assert_allclose(y, ref, rtol=0, atol=1e-10 * np.abs(ref).max())


class TestInjection:
    def test_zero_field(self):
        g = mesh.build_grid(10)
        assert not np.any(mesh.boundary_injection(g, np.zeros(8)))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20)
    def test_linear(self, seed):
        g = mesh.build_grid(10)
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((2, 8))
        # equal up to the rounding of the 1/h scaling
        lhs = mesh.boundary_injection(g, a + b)
        rhs = mesh.boundary_injection(g, a) + mesh.boundary_injection(g, b)
        tol = 4 * np.finfo(float).eps * (np.abs(a) + np.abs(b)).max() / g.h
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=tol)

    def test_matrix_form_agrees(self):
        g = mesh.build_grid(10)
        xi = np.linspace(-1, 1, 8)
        np.testing.assert_allclose(mesh.injection_matrix(g) @ xi, mesh.boundary_injection(g, xi))

    def test_constant_flux_profile(self):
        # constant outward flux -1 with homogeneous data; compare against a very fine grid solution
        def section(n):
            g = mesh.build_grid(n)
            y = mesh.solve(mesh.factorize(mesh.assemble_laplacian_mixed(g)),
                           mesh.boundary_injection(g, -np.ones(n - 2)))
            full = g.extend(y).reshape(n, n)
            return full[(n - 1) // 2]

        fine = section(257)
        errs = []
        for n in (17, 33, 65):
            coarse = section(n)
            errs.append(np.abs(coarse - fine[:: 256 // (n - 1)]).max())
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.7), orders

    def test_wrong_grid(self):
        g = mesh.build_grid(5, mesh.BILINEAR_DIRICHLET)
        with pytest.raises(GridMismatchError):
            mesh.boundary_injection(g, np.zeros(3))


def _strang_fix_matrix(grid, u):
    """Entries of ``int u phi_a phi_b`` via the 7-point degree-3 triangle rule."""
    xy = np.column_stack([grid.x1, grid.x2])
    N = grid.num_nodes
    out = np.zeros((N, N))
    bary = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0.5, 0.5, 0), (0, 0.5, 0.5), (0.5, 0, 0.5), (1 / 3, 1 / 3, 1 / 3)]
    wts = [3 / 60] * 3 + [8 / 60] * 3 + [27 / 60]
    for tri in mesh.triangles(grid):
        p = xy[tri]
        area = 0.5 * abs((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))
        for lam, w in zip(bary, wts):
            lam = np.array(lam)
            uval = lam @ u[tri]
            out[np.ix_(tri, tri)] += area * w * uval * np.outer(lam, lam)
    return out


@pytest.fixture(scope="module")
def fem():
    g = mesh.build_grid(9, mesh.BILINEAR_DIRICHLET)
    return g, mesh.assemble_fem(g)


@pytest.fixture(scope="module")
def grid():
    return mesh.build_grid(9, mesh.BILINEAR_DIRICHLET)


class TestFem:
    def test_stiffness_rows_sum_to_zero_over_full_grid(self, fem):
        g, _ = fem
        tri, area, grads = mesh._local_geometry(g)
        K_full = mesh._assemble_full(g, tri, area[:, None, None] * np.einsum("eak,ebk->eab", grads, grads))
        np.testing.assert_allclose(np.asarray(K_full.sum(axis=1)).ravel(), 0.0, atol=1e-12)

    def test_interior_rows_sum_to_zero(self, fem):
        g, ops = fem
        K = ops.stiffness.matrix
        i, j = g.free % g.n, g.free // g.n
        away = (i >= 2) & (i <= g.n - 3) & (j >= 2) & (j <= g.n - 3)
        np.testing.assert_allclose(np.asarray(K.sum(axis=1)).ravel()[away], 0.0, atol=1e-12)

    @pytest.mark.parametrize("n", [5, 9, 33])
    def test_mass_of_free_region(self, n):
        g = mesh.build_grid(n, mesh.BILINEAR_DIRICHLET)
        ops = mesh.assemble_fem(g)
        one = np.ones(g.num_free)
        s = np.zeros(g.num_nodes)
        s[g.free] = 1.0
        exact = 0.0
        for tri in mesh.triangles(g):
            v = s[tri]
            exact += 0.5 * g.h ** 2 / 12.0 * (np.sum(v ** 2) + np.sum(v) ** 2)
        assert one @ ops.mass.matrix @ one == pytest.approx(exact, rel=1e-12)
        assert np.ones(g.num_nodes) @ ops.full_mass @ np.ones(g.num_nodes) == pytest.approx(1.0, rel=1e-12)

    def test_mass_tends_to_area(self):
        vals = []
        for n in (9, 33, 129):
            g = mesh.build_grid(n, mesh.BILINEAR_DIRICHLET)
            one = np.ones(g.num_free)
            vals.append(one @ mesh.assemble_fem(g).mass.matrix @ one)
        assert vals[0] < vals[1] < vals[2] < 1.0
        assert 1.0 - vals[2] < 0.03

    def test_mass_factor(self, fem):
        _, ops = fem
        M = ops.mass.matrix
        R = ops.mass_chol @ ops.mass_chol.T - M
        assert abs(R).max() <= 1e-12 * abs(M).max()

    def test_lumped_variant(self):
        g = mesh.build_grid(9, mesh.BILINEAR_DIRICHLET)
        ops = mesh.assemble_fem(g, lumped=True)
        assert ops.lumped
        M = ops.mass.matrix
        assert sp.triu(M, 1).nnz == 0 and sp.tril(M, -1).nnz == 0
        np.testing.assert_allclose((ops.mass_chol @ ops.mass_chol.T).toarray(), M.toarray(), atol=1e-15)

    def test_wrong_grid(self):
        with pytest.raises(GridMismatchError):
            mesh.assemble_fem(mesh.build_grid(5))


class TestControlMass:
    def test_zero_control(self, grid):
        assert abs(mesh.assemble_control_mass(grid, np.zeros(grid.num_nodes)).matrix).max() == 0

    def test_unit_control_is_mass(self, grid):
        M = mesh.assemble_fem(grid).mass.matrix
        Mu = mesh.assemble_control_mass(grid, np.ones(grid.num_nodes)).matrix
        assert abs(Mu - M).max() <= 1e-12 * abs(M).max()

    def test_linear_control_against_quadrature(self):
        g = mesh.build_grid(4, mesh.BILINEAR_DIRICHLET)
        u = g.x1.copy()
        full = mesh.assemble_control_mass(g, u, restrict=False).matrix.toarray()
        np.testing.assert_allclose(full, _strang_fix_matrix(g, u), rtol=0, atol=1e-15)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3))
    @settings(max_examples=20, deadline=None)
    def test_linear_and_symmetric(self, seed, alpha):
        g = mesh.build_grid(6, mesh.BILINEAR_DIRICHLET)
        u = np.random.default_rng(seed).standard_normal(g.num_nodes)
        Mu = mesh.assemble_control_mass(g, u).matrix
        M2 = mesh.assemble_control_mass(g, alpha * u).matrix
        assert abs(M2 - alpha * Mu).max() <= 1e-14 * max(1.0, abs(Mu).max())
        assert (Mu != Mu.T).nnz == 0

    def test_gradient_of_bilinear_form(self, grid):
        rng = np.random.default_rng(4)
        q, y = rng.standard_normal((2, grid.num_free))
        g = mesh.control_mass_gradient(grid, q, y)
        for _ in range(3):
            u = rng.standard_normal(grid.num_nodes)
            assert g @ u == pytest.approx(q @ (mesh.assemble_control_mass(grid, u).matrix @ y), rel=1e-12)

    def test_gradient_batched_is_sum(self, grid):
        rng = np.random.default_rng(5)
        Q, Y = rng.standard_normal((2, 3, grid.num_free))
        total = sum(mesh.control_mass_gradient(grid, Q[s], Y[s]) for s in range(3))
        np.testing.assert_allclose(mesh.control_mass_gradient(grid, Q, Y), total, atol=1e-14)

    def test_full_field_required(self, grid):
        with pytest.raises(ValueError):
            mesh.assemble_control_mass(grid, np.ones(grid.num_free))


class TestFactorization:
    def test_identity_scaled(self):
        rhs = np.arange(1.0, 6.0)
        x = mesh.solve(mesh.factorize(mesh.identity_scaled(5, 2.5)), rhs)
        np.testing.assert_allclose(x, rhs / 2.5, rtol=1e-15)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25)
    def test_random_spd_against_dense(self, seed):
        rng = np.random.default_rng(seed)
        B = rng.standard_normal((5, 5))
        A = B @ B.T + 5 * np.eye(5)
        b = rng.standard_normal(5)
        x = mesh.factorize(sp.csr_matrix(A)).solve(b)
        np.testing.assert_allclose(x, scipy.linalg.solve(A, b, assume_a="pos"), rtol=1e-10, atol=1e-12)

    def test_roundtrip_many_rhs(self):
        g = mesh.build_grid(33)
        A = mesh.assemble_laplacian_mixed(g)
        fac = mesh.factorize(A)
        R = np.random.default_rng(0).standard_normal((100, g.num_free))
        X = fac.solve_rows(R)
        res = np.linalg.norm(X @ A.matrix.T - R, axis=1) / np.linalg.norm(R, axis=1)
        assert res.max() <= 1e-10

    def test_cholesky_factor(self):
        g = mesh.build_grid(12)
        A = mesh.assemble_laplacian_mixed(g).matrix
        F = mesh.factorize(A).cholesky_factor()
        assert abs(F @ F.T - A).max() <= 1e-12 * abs(A).max()

    def test_rejects_indefinite_bilinear_operator(self):
        g = mesh.build_grid(9, mesh.BILINEAR_DIRICHLET)
        ops = mesh.assemble_fem(g)
        K, M = ops.stiffness.matrix.toarray(), ops.mass.matrix.toarray()
        lam1 = scipy.linalg.eigh(K, M, eigvals_only=True)[0]
        assert lam1 == pytest.approx(2 * math.pi ** 2, rel=0.1)
        for margin, ok in ((-1.0, True), (1.0, False)):
            u = np.full(g.num_nodes, -(lam1 + margin))
            op = mesh.DiscreteOperator("state", ops.stiffness.matrix + mesh.assemble_control_mass(g, u).matrix)
            if ok:
                mesh.factorize(op)
            else:
                with pytest.raises(DefinitenessError):
                    mesh.factorize(op)

    def test_rejects_nonsymmetric(self):
        A = sp.csr_matrix(np.array([[2.0, 1.0], [0.0, 2.0]]))
        with pytest.raises(DefinitenessError):
            mesh.factorize(A)

    def test_dump_coo(self, tmp_path):
        op = mesh.assemble_laplacian_mixed(mesh.build_grid(4))
        op.dump_coo(tmp_path / "a.txt")
        data = np.loadtxt(tmp_path / "a.txt")
        rebuilt = sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=op.shape)
        assert abs(rebuilt - op.matrix).max() == 0
