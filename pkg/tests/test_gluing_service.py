import dataclasses
import json
import math

import numpy as np
import pytest

from services.gluing_service import (
    GluingService,
    NodeModel,
    fit_slope,
    hausdorff_distance,
    make_pushforward_oracle,
)
from services.linearized_service import ACStructure, LinearizedService
from utils.errors import (
    InputError,
    IterationError,
    ParameterDomainError,
    ParameterError,
    ShapeError,
    TooLargeTError,
    ValidationError,
)
from utils.geometry import MapSample, build_annulus_grid, constant_map


@pytest.fixture
def linearized(cauchy):
    return LinearizedService(cauchy=cauchy, threads=2, trials=3, seed=0)


@pytest.fixture
def service(linearized):
    return GluingService(linearized=linearized, threads=2, newton_tol=1e-9, max_iter=30)


@pytest.fixture
def oracle():
    return make_pushforward_oracle(seed=3, amplitude=0.05)


def _branch(direction):
    direction = np.asarray(direction, dtype=complex)

    def branch(z):
        z = np.asarray(z, dtype=complex)
        values = z[..., None] * direction
        return values, np.broadcast_to(direction, values.shape).copy(), np.zeros_like(values)

    return branch


class TestNodeModel:
    def test_linear_node(self):
        node = NodeModel.linear()
        np.testing.assert_array_equal(node.node_image, np.zeros(2))
        assert node.n == 2

    def test_rejects_tangent_branches(self):
        with pytest.raises(InputError):
            NodeModel(_branch([1, 0]), _branch([2, 0]), ACStructure.zero())

    def test_rejects_disjoint_branches(self):
        def shifted(z):
            values, dz, dzbar = _branch([0, 1])(z)
            return values + 1.0, dz, dzbar

        with pytest.raises(InputError):
            NodeModel(_branch([1, 0]), shifted, ACStructure.zero())

    def test_needs_two_dimensions(self):
        with pytest.raises(ParameterError):
            NodeModel.linear(1)


class TestPushforwardOracle:
    def test_amplitude_is_bounded(self):
        with pytest.raises(ParameterError):
            make_pushforward_oracle(seed=0, amplitude=0.2)

    def test_zero_amplitude_is_standard(self):
        assert make_pushforward_oracle(seed=0, amplitude=0.0).structure.is_zero

    def test_structure_scales_with_amplitude(self):
        small = make_pushforward_oracle(seed=1, amplitude=0.025).structure.c1_bound
        large = make_pushforward_oracle(seed=1, amplitude=0.05).structure.c1_bound
        assert large / small == pytest.approx(2.0)
        assert large < 0.5

    def test_curve_solves_equation(self, linearized, oracle):
        grid = build_annulus_grid(1e-3, 24, 16)
        residual = linearized.dbar_perturbed(oracle.curve(grid), oracle.structure)
        assert np.max(np.abs(residual.data)) <= 1e-12

    def test_node_passes_through_origin(self, oracle):
        node = oracle.node()
        np.testing.assert_allclose(node.node_image, np.zeros(2), atol=1e-15)


class TestPregluing:
    def test_outside_neck_equals_branch(self, service):
        t = 1e-4
        grid = build_annulus_grid(t, 48, 32)
        w = service.preglue_w(NodeModel.linear(), t, grid)
        outside = grid.radii >= 2 * service.cutoff_radius(t)
        np.testing.assert_allclose(w.data[0, outside, :, 0], grid.coordinates[outside], atol=1e-15)
        assert not np.any(w.data[0, outside, :, 1])

    def test_seam_maps_to_node(self, service, oracle):
        t = 1e-4
        node = oracle.node()
        w = service.preglue_w(node, t)
        np.testing.assert_allclose(w.data[:, 0], np.broadcast_to(node.node_image, w.data[:, 0].shape), atol=1e-15)

    def test_consistent_with_nodal_model(self, service, oracle):
        assert service.pregluing_consistency(oracle.node(), 1e-4) <= 1e-12

    def test_nodal_map_at_zero(self, service):
        u = service.preglue_u(NodeModel.linear(), 0)
        np.testing.assert_allclose(u.data[0, :, :, 0], u.grid.coordinates, atol=1e-15)
        np.testing.assert_allclose(u.data[1, :, :, 1], u.grid.coordinates, atol=1e-15)

    @pytest.mark.parametrize('t', [0, 1.0, 2j])
    def test_w_needs_annulus(self, service, t):
        with pytest.raises(ParameterDomainError):
            service.preglue_w(NodeModel.linear(), t)

    def test_defect_scaling(self, service):
        node = NodeModel.linear()
        t_list = [1e-2, 1e-4, 1e-6, 1e-8]
        p4 = service.defect_scaling_sweep(node, 4.0, t_list)
        p3 = service.defect_scaling_sweep(node, 3.0, t_list)
        assert p4.monotone
        assert p4.slope == pytest.approx(0.125, abs=0.1)
        assert p3.slope > p4.slope

    def test_defect_sweep_needs_values(self, service):
        with pytest.raises(ValidationError):
            service.defect_scaling_sweep(NodeModel.linear(), 4.0, [])


class TestSlopeFit:
    def test_fits_power_law(self):
        slope, monotone = fit_slope([1.0, 1e-2, 1e-4], [1.0, 0.5, 0.25])
        assert monotone
        assert slope == pytest.approx(math.log(2) / math.log(100))

    def test_non_monotone_has_no_slope(self):
        assert fit_slope([1.0, 1e-2, 1e-4], [1.0, 2.0, 0.5]) == (None, False)


class TestNewton:
    def test_standard_node_needs_one_step(self, service):
        t = 1e-4
        grid = build_annulus_grid(t, 24, 16)
        w, record = service.newton_solve(NodeModel.linear(), t, grid=grid)
        assert record.converged
        assert record.steps_taken == 1
        np.testing.assert_allclose(w.data[0, :, :, 0], grid.coordinates, atol=1e-10)
        np.testing.assert_allclose(w.data[0, :, :, 1], t / grid.coordinates, atol=1e-10)

    def test_correction_vanishes_away_from_neck(self, service):
        t = 1e-4
        grid = build_annulus_grid(t, 24, 16)
        node = NodeModel.linear()
        w, _ = service.newton_solve(node, t, grid=grid)
        xi = w.data - service.preglue_w(node, t, grid).data
        outside = grid.radii >= 2 * service.cutoff_radius(t)
        assert np.max(np.abs(xi[0, outside, :, 0])) <= 1e-10

    def test_recovers_pushforward_curve(self, service, oracle):
        t = 1e-3
        grid = build_annulus_grid(t, 64, 16)
        exact = oracle.curve(grid)
        w, record = service.newton_solve(oracle.node(), t, boundary=exact.values, grid=grid)
        assert record.converged
        assert record.defects[-1] <= 1e-9
        assert hausdorff_distance(w.values, exact.values) <= 1e-6
        assert record.defects[-1] / record.defects[-2] <= 1e-2
        assert record.kantorovich is not None and record.kantorovich <= 0.25

    def test_gate_rejects_large_product(self, service, oracle, monkeypatch):
        monkeypatch.setattr(service.linearized, 'measure_c1', lambda *args, **kwargs: 1e6)
        with pytest.raises(TooLargeTError) as err:
            service.newton_solve(oracle.node(), 1e-3, grid=build_annulus_grid(1e-3, 24, 16))
        assert err.value.details['product'] > 0.25

    def test_stalled_iteration_keeps_record(self, linearized, oracle, monkeypatch):
        solve = linearized.neumann_right_inverse

        def damped(*args, **kwargs):
            solution = solve(*args, **kwargs)
            return dataclasses.replace(solution, xi=solution.xi * 0.5)

        monkeypatch.setattr(linearized, 'neumann_right_inverse', damped)
        short = GluingService(linearized=linearized, threads=2, newton_tol=1e-9, max_iter=4)
        with pytest.raises(IterationError) as err:
            short.newton_solve(oracle.node(), 1e-3, grid=build_annulus_grid(1e-3, 24, 16), gate=False)
        record = err.value.record
        assert not record.converged
        assert record.steps_taken == 4
        assert err.value.details['defect'] == record.defects[-1] > 1e-9
        newton = record.defects[1:]
        assert all(b < a for a, b in zip(newton, newton[1:]))

    def test_correction_scales_with_t(self, service):
        t_list = [1e-2, 1e-4, 1e-6, 1e-8]
        rows = service.solve_sweep(NodeModel.linear(), 4.0, t_list)
        assert all(row.converged for row in rows)
        slope, monotone = fit_slope([row.t_abs for row in rows], [row.xi_norm for row in rows])
        assert monotone
        assert slope == pytest.approx(1 / 8, abs=0.15)

    def test_unknown_inverse(self, service):
        with pytest.raises(ParameterError):
            service.newton_solve(NodeModel.linear(), 1e-4, grid=build_annulus_grid(1e-4, 24, 16), inverse='qr')

    def test_grid_for_other_t(self, service):
        with pytest.raises(ShapeError):
            service.newton_solve(NodeModel.linear(), 1e-4, grid=build_annulus_grid(1e-3, 24, 16))


class TestStability:
    def test_difference_tracks_boundary_change(self, service):
        report = service.verify_annulus_stability(NodeModel.linear(), 1e-4, scale=1e-4,
                                                  grid=build_annulus_grid(1e-4, 24, 16), seed=2)
        assert report.sup_difference == pytest.approx(1e-4, rel=1e-6)
        assert 0 < report.ratio < math.inf
        assert report.c1_bound == 0.0

    def test_ratio_uniform_in_t_for_perturbed_structure(self, service, oracle):
        ratios = []
        for t in (1e-3, 1e-4, 1e-6):
            report = service.verify_annulus_stability(oracle.node(), t, scale=1e-4,
                                                      grid=build_annulus_grid(t, 32, 16), seed=2)
            assert report.c1_bound > 0
            ratios.append(report.ratio)
        assert min(ratios) > 0
        assert max(ratios) / min(ratios) <= 3.0

    def test_zero_scale(self, service):
        report = service.verify_annulus_stability(NodeModel.linear(), 1e-4, scale=0.0,
                                                  grid=build_annulus_grid(1e-4, 24, 16))
        assert report.ratio == 0.0


class TestArtifacts:
    def test_hausdorff_distance(self):
        grid = build_annulus_grid(1e-2, 12, 8)
        a = MapSample(grid, np.random.default_rng(0).standard_normal(grid.shape + (2,)))
        shift = constant_map(grid, [0.1, 0.0])
        assert hausdorff_distance(a, a) == 0.0
        assert 0.0 < hausdorff_distance(a, a + shift) <= 0.1 + 1e-12

    def test_sweep_csv(self, service, tmp_path):
        rows = service.solve_sweep(NodeModel.linear(), 4.0, [1e-2, 1e-4], n_r=24, n_theta=16)
        assert all(row.converged and row.iterations == 1 for row in rows)
        path = tmp_path / 'solve.csv'
        service.write_sweep_csv(str(path), rows)
        lines = path.read_text().splitlines()
        assert lines[0] == 't_abs,p,defect_norm,xi_norm,iterations,converged'
        assert lines[1].startswith('1.000000000000e-02,4,')
        assert lines[1].endswith(',1,true')

    def test_solution_json(self, service, tmp_path):
        t = 1e-4
        w, record = service.newton_solve(NodeModel.linear(), t, grid=build_annulus_grid(t, 12, 8))
        path = tmp_path / 'solution.json'
        service.write_solution_json(str(path), w, record)
        doc = json.loads(path.read_text())
        assert doc['record']['converged'] is True
        assert doc['solution']['n_r'] == 12
        assert len(doc['solution']['values']) == 2 * 12 * 8 * 2
