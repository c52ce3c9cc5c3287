import json

import numpy as np
import pytest

from services.linearized_service import (
    ACStructure,
    LinearizedService,
    random_line_bundle_perturbation,
    reflect_ring,
    seam_average,
    solve_antilinear,
)
from utils.errors import (
    ConfigurationError,
    InputError,
    ParameterError,
    RankError,
    ResolutionError,
    ShapeError,
    TooLargeTError,
)
from utils.geometry import (
    MapSample,
    ZeroOneForm,
    aligned_offset,
    build_annulus_grid,
    build_nodal_grid,
    constant_map,
    dbar,
    inner_product,
    lp_norm,
    random_smooth_sample,
)


@pytest.fixture
def service(cauchy):
    return LinearizedService(cauchy=cauchy, threads=2, trials=3, seed=0, max_iter=60)


def _coupled_structure(amplitude=0.1):
    """q(w) = [[0, a conj(w2)], [0, 0]]: real-linear in w, so F is quadratic"""
    def q(w):
        out = np.zeros(w.shape + (2,), dtype=complex)
        out[..., 0, 1] = amplitude * np.conj(w[..., 1])
        return out

    def dq(w, xi):
        out = np.zeros(w.shape + (2,), dtype=complex)
        out[..., 0, 1] = amplitude * np.conj(xi[..., 1])
        return out

    return ACStructure(q=q, dq=dq, c1_bound=amplitude, n=2, name='coupled')


def _form(grid, seed):
    return random_smooth_sample(grid, np.random.default_rng(seed), kind=ZeroOneForm)


class TestACStructure:
    def test_rejects_large_structure(self):
        with pytest.raises(ParameterError):
            ACStructure.constant(0.6 * np.eye(2))

    def test_random_constant_has_requested_norm(self, rng):
        q = ACStructure.random_constant(rng, 0.05)
        assert q.c1_bound == pytest.approx(0.05)
        assert not q.is_zero

    def test_zero_structure(self):
        q = ACStructure.zero(3)
        assert q.is_zero
        assert q.q(np.ones((4, 3))).shape == (4, 3, 3)

    def test_derivative_check(self, rng):
        w = rng.standard_normal((10, 2)) + 1j * rng.standard_normal((10, 2))
        q = _coupled_structure()
        assert q.check_derivative(w) < 1e-6
        q.validate(w)

    def test_solve_antilinear(self, rng):
        Q = 0.3 * (rng.standard_normal((5, 2, 2)) + 1j * rng.standard_normal((5, 2, 2)))
        v = rng.standard_normal((5, 2)) + 1j * rng.standard_normal((5, 2))
        z = solve_antilinear(Q, v)
        back = z + np.einsum('...ij,...j->...i', Q, np.conj(z))
        np.testing.assert_allclose(back, v, atol=1e-12)


class TestLinearizedOperator:
    def test_zero_structure_is_dbar(self, service, annulus_grid, rng):
        w = random_smooth_sample(annulus_grid, rng)
        out = service.dbar_perturbed(w, ACStructure.zero())
        np.testing.assert_allclose(out.data, dbar(w).data, atol=1e-14)

    def test_component_mismatch(self, service, annulus_grid, rng):
        w = random_smooth_sample(annulus_grid, rng)
        with pytest.raises(ShapeError):
            service.dbar_perturbed(w, ACStructure.zero(3))

    def test_matches_difference_quotient(self, service, annulus_grid, rng):
        q = _coupled_structure()
        w = random_smooth_sample(annulus_grid, rng)
        xi = random_smooth_sample(annulus_grid, rng)
        eps = 1e-4
        plus = service.dbar_perturbed(w + eps * xi, q)
        minus = service.dbar_perturbed(w - eps * xi, q)
        fd = (plus.data - minus.data) / (2 * eps)
        exact = service.linearize_at(w, q)(xi).data
        assert np.max(np.abs(fd - exact)) <= 1e-6 * max(1.0, np.max(np.abs(exact)))

    def test_one_sided_quotient_is_first_order(self, service, annulus_grid, rng):
        q = _coupled_structure()
        w = random_smooth_sample(annulus_grid, rng)
        xi = random_smooth_sample(annulus_grid, rng)
        base = service.dbar_perturbed(w, q).data
        exact = service.linearize_at(w, q)(xi).data

        def error(eps):
            step = service.dbar_perturbed(w + eps * xi, q).data
            return np.max(np.abs((step - base) / eps - exact))

        assert error(1e-4) / error(1e-5) == pytest.approx(10.0, rel=0.05)

    def test_real_linear_not_complex_linear(self, service, annulus_grid, rng):
        q = ACStructure.random_constant(rng, 0.2)
        w = random_smooth_sample(annulus_grid, rng)
        xi = random_smooth_sample(annulus_grid, rng)
        eta = random_smooth_sample(annulus_grid, rng)
        op = service.linearize_at(w, q)
        np.testing.assert_allclose(op(xi + 2.0 * eta).data, op(xi).data + 2.0 * op(eta).data, atol=1e-10)
        assert np.max(np.abs(op(1j * xi).data - 1j * op(xi).data)) > 1e-3


class TestExtension:
    @pytest.fixture
    def setup(self, service):
        grid = build_annulus_grid(0.01, 16, 16)
        base = service.nodal_right_inverse(grid)
        section = base.solve(service.pull_to_nodal(_form(grid, 5), base.grid))
        return grid, base, section

    def test_constant_extends_to_constant(self, service, setup):
        grid, base, _ = setup
        const = constant_map(base.grid, [1.0 + 2.0j, -0.5j])
        ext = service.extension_operator(const, grid)
        np.testing.assert_allclose(ext.data[..., 0], 1.0 + 2.0j, atol=1e-12)
        np.testing.assert_allclose(ext.data[..., 1], -0.5j, atol=1e-12)
        assert np.max(np.abs(ext.dbar.data)) < 1e-10

    def test_agrees_with_own_branch_outside_neck(self, service, setup):
        grid, base, section = setup
        ext = service.extension_operator(section, grid)
        offset = aligned_offset(grid, base.grid)
        outside = grid.radii >= 0.01 ** 0.25 * (1 + 1e-9)
        own = section.data[0, offset:][outside]
        np.testing.assert_allclose(ext.data[0][outside], own, atol=1e-13)
        np.testing.assert_allclose(ext.dbar.data[0][outside], section.dbar.data[0, offset:][outside], atol=1e-13)

    def test_single_valued_on_seam(self, service, setup):
        grid, _, section = setup
        ext = service.extension_operator(section, grid)
        x_side = reflect_ring(reflect_ring(ext.data[0, :1], grid.t), grid.t)
        y_side = reflect_ring(ext.data[1, :1], grid.t)
        np.testing.assert_allclose(x_side, y_side, atol=1e-10)

    def test_rejects_annulus_section(self, service, setup):
        grid, _, _ = setup
        with pytest.raises(InputError):
            service.extension_operator(MapSample(grid, grid.zeros()), grid)

    def test_rejects_mismatched_node(self, service, setup):
        grid, base, _ = setup
        data = base.grid.zeros()
        data[1] = 1.0
        with pytest.raises(InputError):
            service.extension_operator(MapSample(base.grid, data), grid)

    def test_rejects_misaligned_grids(self, service, setup):
        _, base, _ = setup
        other = build_annulus_grid(0.01, 20, 16)
        with pytest.raises(ShapeError):
            service.extension_operator(constant_map(base.grid, [1.0, 0.0]), other)


class TestQuasiInverse:
    def test_seam_average_is_idempotent(self, annulus_grid):
        eta = seam_average(_form(annulus_grid, 1))
        np.testing.assert_allclose(seam_average(eta).data, eta.data, atol=1e-12)

    def test_requires_base(self, service, annulus_grid):
        with pytest.raises(ConfigurationError):
            service.quasi_inverse(_form(annulus_grid, 0), None)

    def test_zero_maps_to_zero(self, service, annulus_grid):
        base = service.nodal_right_inverse(annulus_grid)
        v_slot, xi = service.quasi_inverse(ZeroOneForm(annulus_grid, annulus_grid.zeros()), base)
        assert v_slot.size == 0
        assert not np.any(xi.data)

    def test_discrepancy_shrinks_with_t(self, service):
        rows = service.discrepancy_sweep([1e-2, 1e-4, 1e-6], p=4.0, n_r=48, n_theta=32, trials=20, seed=0)
        values = [row.median_discrepancy for row in rows]
        assert all(b < a for a, b in zip(values, values[1:]))
        assert values[-1] < 0.5
        assert all(row.n_trials == 20 for row in rows)

    def test_extension_defect(self, service):
        grid = build_annulus_grid(1e-4, 24, 16)
        base = service.nodal_right_inverse(grid)
        defect = service.extension_defect(_form(grid, 4), base)
        assert np.isfinite(defect)
        assert defect >= 0.0
        assert service.extension_defect(ZeroOneForm(grid, grid.zeros()), base) == 0.0

    def test_extension_defect_needs_nodal_base(self, service):
        grid = build_annulus_grid(1e-4, 24, 16)
        with pytest.raises(ConfigurationError):
            service.extension_defect(_form(grid, 4), service.annulus_right_inverse(grid))

    def test_sweep_writes_csv(self, service, tmp_path):
        rows = service.discrepancy_sweep([1e-4], p=4.0, n_r=16, n_theta=16, trials=2, seed=1)
        assert len(rows) == 1
        assert rows[0].n_trials == 2
        path = tmp_path / 'discrepancy.csv'
        service.write_discrepancy_csv(str(path), rows)
        lines = path.read_text().splitlines()
        assert lines[0] == 't_abs,p,median_discrepancy,n_trials'
        assert lines[1].startswith('1.000000000000e-04,4,')


class TestNeumann:
    @pytest.fixture
    def setup(self, service):
        grid = build_annulus_grid(1e-6, 24, 16)
        return grid, service.nodal_right_inverse(grid)

    def test_refuses_large_defect(self, service, setup):
        grid, base = setup
        with pytest.raises(TooLargeTError) as err:
            service.neumann_right_inverse(_form(grid, 0), base, rho=0.6)
        assert err.value.details['rho'] == 0.6

    def test_zero_input(self, service, setup):
        grid, base = setup
        sol = service.neumann_right_inverse(ZeroOneForm(grid, grid.zeros()), base, rho=0.1)
        assert sol.iterations == 0
        assert not np.any(sol.xi.data)

    def test_solves_dbar(self, service, setup):
        grid, base = setup
        eta = _form(grid, 2)
        sol = service.neumann_right_inverse(eta, base, tol=1e-8)
        assert sol.rho < 0.5
        assert sol.residual <= 1e-8
        target = seam_average(eta)
        assert lp_norm(sol.xi.dbar - target, 4.0) <= 1e-7 * lp_norm(target, 4.0)

    def test_annulus_base(self, service):
        grid = build_annulus_grid(1e-6, 24, 16)
        base = service.annulus_right_inverse(grid)
        coefficients = np.zeros((2, 2, 2), dtype=complex)
        coefficients[0, 1, 0] = 1.0
        coefficients[1, 1, 1] = 1.0
        w = service.laurent_sample(grid, coefficients)
        operator = service.linearize_at(w, _coupled_structure(0.05))
        eta = _form(grid, 3)
        sol = service.neumann_right_inverse(eta, base, operator, tol=1e-8)
        assert not base.nodal
        assert sol.rho < 0.5
        target = seam_average(eta)
        assert lp_norm(operator(sol.xi) - target, 4.0) <= 1e-7 * lp_norm(target, 4.0)

    def test_norm_is_uniform_in_t(self, service):
        norms = []
        for t in (1e-4, 1e-6, 1e-8):
            grid = build_annulus_grid(t, 24, 16)
            report = service.right_inverse_norms(service.nodal_right_inverse(grid), trials=3, seed=4)
            assert report.rho < 0.5
            assert report.bound > 0
            norms.append(report.right_inverse_norm)
        assert max(norms) / min(norms) <= 3.0


class TestKernel:
    @pytest.fixture
    def nodal(self):
        return build_nodal_grid(build_annulus_grid(0.01, 12, 16))

    def test_dimension_of_polynomial_kernel(self, service, nodal):
        basis = service.kernel_basis(nodal, degree=2)
        assert len(basis) == 2 * 2 * (2 * 3 - 1)
        for element in basis:
            values = element.xi.data
            np.testing.assert_allclose(values[0, 0].mean(axis=0), values[1, 0].mean(axis=0), atol=1e-8)

    def test_projection_reproduces_kernel_elements(self, service, nodal):
        basis = service.kernel_basis(nodal, degree=1)
        mask = nodal.radial_mask(0.5, 1.0)
        target = basis[0].xi * 2.0 + basis[-1].xi * -0.5
        proj = service.kernel_projection(np.zeros(0), target, basis, mask)
        assert proj.residual_norm < 1e-8
        np.testing.assert_allclose(proj.xi.data, target.data, atol=1e-8)

    def test_projection_needs_support(self, service, nodal):
        basis = service.kernel_basis(nodal, degree=1)
        empty = np.zeros(nodal.shape, dtype=bool)
        with pytest.raises(RankError):
            service.kernel_projection(np.zeros(0), basis[0].xi, basis, empty)

    def test_projection_is_orthogonal(self, service, nodal):
        basis = service.kernel_basis(nodal, degree=1)
        mask = nodal.radial_mask(0.5, 1.0)
        xi = random_smooth_sample(nodal, np.random.default_rng(5))
        proj = service.kernel_projection(np.zeros(0), xi, basis, mask)
        residual = xi - proj.xi
        total = inner_product(xi, xi, mask).real
        split = inner_product(proj.xi, proj.xi, mask).real + inner_product(residual, residual, mask).real
        assert split == pytest.approx(total, rel=1e-8)
        assert proj.residual_norm ** 2 == pytest.approx(inner_product(residual, residual, mask).real, rel=1e-8)

    def test_lower_bound_constant(self, service, nodal):
        basis = service.kernel_basis(nodal, degree=1)
        constant = service.kernel_lower_bound_constant(basis, nodal.radial_mask(0.5, 1.0), trials=3, seed=0)
        assert np.isfinite(constant)
        assert constant > 0


class TestLineBundles:
    @pytest.mark.parametrize('k', [-4, -3, -2, -1, 0, 1, 2, 3])
    def test_standard_operator(self, service, k):
        dims = service.line_bundle_dbar_dims(k)
        assert dims.kernel_dim == max(k + 1, 0)
        assert dims.coker_dim == max(-k - 1, 0)
        assert dims.index == k + 1

    @pytest.mark.parametrize('k', [-1, 0, 2])
    def test_small_perturbation_stays_surjective(self, service, k):
        a = random_line_bundle_perturbation(np.random.default_rng(7), 1e-2)
        dims = service.line_bundle_dbar_dims(k, a, resolution=3)
        assert dims.coker_dim == 0
        assert dims.index == k + 1

    def test_index_independent_of_resolution(self, service):
        assert {service.line_bundle_dbar_dims(-3, resolution=m).index for m in (3, 4, 5)} == {-2}

    def test_resolution_too_small(self, service):
        with pytest.raises(ResolutionError):
            service.line_bundle_dbar_dims(-3, resolution=2)

    def test_report_json(self, service, tmp_path):
        dims = service.line_bundle_report([0, 1], seeds=[-1, 3])
        path = tmp_path / 'dims.json'
        service.write_dims_json(str(path), dims)
        doc = json.loads(path.read_text())
        assert [d['k'] for d in doc] == [0, 0, 1, 1]
        assert all(d['index'] == d['k'] + 1 for d in doc)
        assert set(doc[0]) == {'k', 'kernel_dim', 'coker_dim', 'index'}


class TestMaximumPrinciple:
    def test_interior_bounded_by_boundary(self, service):
        report = service.check_maximum_principle([1e-2, 1e-4, 1e-6], cases_per_t=17, seed=11)
        assert len(report.cases) == 51
        assert report.passed
        assert all(case.boundary_sup > 0 for case in report.cases)
