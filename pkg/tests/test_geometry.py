import math

import numpy as np
import pytest

from utils.errors import GridSizeError, ParameterDomainError, ParameterError, ShapeError, SingularPointError
from utils.geometry import (
    MapSample,
    ZeroOneForm,
    aligned_offset,
    beta_cutoff,
    beta_gradient_integral,
    build_annulus_grid,
    build_nodal_grid,
    constant_map,
    dbar,
    from_json_envelope,
    l1p_norm,
    lp_norm,
    metric_weight,
    partial,
    random_smooth_sample,
    sup_norm,
    to_json_envelope,
    write_norm_csv,
)


class TestGridConstruction:
    def test_annulus_radii_span(self):
        grid = build_annulus_grid(0.01, 32, 64)
        assert grid.charts == 2
        assert grid.radii[0] == pytest.approx(0.1, rel=1e-12)
        assert grid.radii[-1] == 1.0
        assert np.all(np.diff(grid.radii) > 0)
        assert np.all(grid.weights > 0)

    def test_disk_uses_radial_truncation(self):
        grid = build_annulus_grid(0, 32, 64, r_min=1e-6)
        assert grid.charts == 1
        assert grid.radii[0] == pytest.approx(1e-6, rel=1e-10)

    @pytest.mark.parametrize('t', [1.5, 1.0, -1j])
    def test_out_of_domain(self, t):
        with pytest.raises(ParameterDomainError):
            build_annulus_grid(t, 32, 64)

    @pytest.mark.parametrize('n_r, n_theta', [(1, 64), (32, 4), (32, 48)])
    def test_degenerate_sizes(self, n_r, n_theta):
        with pytest.raises(GridSizeError):
            build_annulus_grid(0.01, n_r, n_theta)

    def test_unknown_metric(self):
        with pytest.raises(ParameterError):
            build_annulus_grid(0.01, 16, 16, metric='hyperbolic')


class TestQuadrature:
    def test_disk_area(self):
        grid = build_annulus_grid(0, 48, 32, r_min=1e-6)
        assert grid.area() == pytest.approx(math.pi * (1 - 1e-12), rel=1e-12)

    def test_induced_area_per_chart(self):
        t = 0.01
        grid = build_annulus_grid(t, 40, 32, metric='induced')
        per_chart = grid.weights.sum(axis=(1, 2))
        np.testing.assert_allclose(per_chart, math.pi * (1 - abs(t) ** 2), rtol=1e-12)

    def test_flat_area_per_chart(self):
        t = 1e-4
        grid = build_annulus_grid(t, 40, 32, metric='flat')
        per_chart = grid.weights.sum(axis=(1, 2))
        np.testing.assert_allclose(per_chart, math.pi * (1 - abs(t)), rtol=1e-12)

    def test_radial_moment(self):
        grid = build_annulus_grid(0.01, 128, 16, metric='flat')
        r0 = grid.radii[0]
        values = np.abs(grid.coordinates) ** 2
        total = np.sum(grid.weights[0] * values)
        assert total == pytest.approx(2 * math.pi * (1 - r0 ** 4) / 4, rel=1e-7)

    def test_angular_harmonic_integrates_to_zero(self):
        grid = build_annulus_grid(0.01, 32, 32)
        values = grid.coordinates ** 3
        assert abs(np.sum(grid.weights[0] * values)) < 1e-12


class TestNodalAlignment:
    def test_rows_coincide(self):
        annulus = build_annulus_grid(1e-4, 24, 16)
        nodal = build_nodal_grid(annulus, r_min=1e-6)
        offset = aligned_offset(annulus, nodal)
        assert nodal.charts == 2
        assert nodal.step == annulus.step
        np.testing.assert_array_equal(nodal.radii[offset:], annulus.radii)

    def test_reflected_rows_present(self):
        t = 1e-4
        annulus = build_annulus_grid(t, 24, 16)
        nodal = build_nodal_grid(annulus, r_min=1e-2)
        top = nodal.n_r - 1
        for i in range(annulus.n_r):
            k = top - (annulus.n_r - 1 + i)
            assert k >= 0
            assert nodal.radii[k] == pytest.approx(t / annulus.radii[i], rel=1e-12)


class TestMetricWeight:
    def test_outer_circle(self):
        assert metric_weight(1.0, 0.01) == pytest.approx(1.0001, rel=1e-14)

    def test_symmetry_circle(self):
        t = 0.01
        assert metric_weight(math.sqrt(t) * 1j, t) == pytest.approx(2.0, rel=1e-14)

    def test_flat_at_node(self):
        assert metric_weight(0.3 + 0.1j, 0) == 1.0

    def test_singular_point(self):
        with pytest.raises(SingularPointError):
            metric_weight(0, 0.01)


class TestNorms:
    def test_zero(self):
        grid = build_annulus_grid(0, 16, 16)
        assert lp_norm(constant_map(grid, [0, 0]), 4) == 0.0

    def test_constant_on_disk(self):
        grid = build_annulus_grid(0, 32, 16)
        one = MapSample(grid, np.ones(grid.shape))
        assert lp_norm(one, 4) == pytest.approx(math.pi ** 0.25, abs=1e-4)
        assert lp_norm(2 * one, 4) == pytest.approx(2 * lp_norm(one, 4), rel=1e-14)

    @pytest.mark.parametrize('p', [2, 1.5, -1])
    def test_rejects_small_p(self, p):
        grid = build_annulus_grid(0, 16, 16)
        with pytest.raises(ParameterError):
            lp_norm(constant_map(grid, [1]), p)

    def test_l1p_of_constant(self):
        grid = build_annulus_grid(0.01, 32, 16)
        c = constant_map(grid, [1 + 2j, -0.5])
        assert l1p_norm(c, 4) == pytest.approx(lp_norm(c, 4), rel=1e-10)

    def test_l1p_of_coordinate(self):
        grid = build_annulus_grid(0, 128, 16)
        x = MapSample(grid, grid.coordinates[None])
        one = MapSample(grid, np.ones(grid.shape))
        assert l1p_norm(x, 4) == pytest.approx(lp_norm(x, 4) + lp_norm(one, 4), abs=1e-3)

    def test_homogeneity_and_triangle(self):
        grid = build_annulus_grid(0.01, 24, 16)
        rng = np.random.default_rng(3)
        f = random_smooth_sample(grid, rng)
        g = random_smooth_sample(grid, rng)
        assert l1p_norm(3 * f, 4) == pytest.approx(3 * l1p_norm(f, 4), rel=1e-12)
        assert lp_norm(f + g, 5) <= lp_norm(f, 5) + lp_norm(g, 5) + 1e-12
        assert l1p_norm(f + g, 5) <= l1p_norm(f, 5) + l1p_norm(g, 5) + 1e-12

    def test_monotone_under_domination(self):
        grid = build_annulus_grid(0.01, 24, 16)
        f = random_smooth_sample(grid, np.random.default_rng(5))
        damped = MapSample(grid, f.values * 0.5 * (1 + np.cos(grid.theta))[None, None, :, None])
        assert lp_norm(damped, 4) <= lp_norm(f, 4)


class TestDerivatives:
    def test_dbar_of_holomorphic_monomials(self):
        grid = build_annulus_grid(0.01, 32, 32)
        for k in (-2, 0, 1, 3):
            f = MapSample(grid, np.broadcast_to(grid.coordinates ** k, grid.shape))
            assert sup_norm(dbar(f)) < 1e-9

    def test_dbar_of_conjugate(self):
        grid = build_annulus_grid(0.01, 128, 16)
        f = MapSample(grid, np.broadcast_to(np.conj(grid.coordinates), grid.shape))
        np.testing.assert_allclose(dbar(f).coeff, 1.0, atol=1e-6)
        assert sup_norm(partial(f)) < 1e-9

    def test_partial_of_square(self):
        grid = build_annulus_grid(0.01, 128, 16)
        z = grid.coordinates
        f = MapSample(grid, np.broadcast_to(z ** 2, grid.shape))
        np.testing.assert_allclose(partial(f).values[0], 2 * z, atol=1e-4)

    def test_shape_mismatch(self):
        grid = build_annulus_grid(0.01, 16, 16)
        with pytest.raises(ShapeError):
            MapSample(grid, np.zeros((2, 15, 16, 2)))


class TestCutoff:
    def test_plateaus(self):
        delta = 1e-4
        assert beta_cutoff(delta, 1e-3) == 1.0
        assert beta_cutoff(delta, 0.5) == 0.0
        assert 0.0 < beta_cutoff(delta, 10 ** -1.5) < 1.0

    def test_node_value(self):
        assert beta_cutoff(1e-2, 0) == 1.0

    @pytest.mark.parametrize('delta', [10.0 ** -k for k in range(1, 13)])
    def test_plateaus_over_sweep(self, delta):
        inner = np.array([delta ** 0.5, 0.5 * delta ** 0.5])
        outer = np.array([delta ** 0.25, 2 * delta ** 0.25])
        np.testing.assert_allclose(beta_cutoff(delta, inner), 1.0, atol=1e-12)
        np.testing.assert_allclose(beta_cutoff(delta, np.minimum(outer, 1.0)), 0.0, atol=1e-12)

    def test_bad_delta(self):
        with pytest.raises(ParameterDomainError):
            beta_cutoff(1.0, 0.5)

    @pytest.mark.parametrize('p', [3, 4])
    def test_gradient_integral_decreases(self, p):
        values = [beta_gradient_integral(10.0 ** -k, p) for k in (2, 4, 6, 8)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_gradient_integral_closed_form(self):
        delta, p = 1e-4, 4
        bump = 30 ** 4 * math.factorial(8) ** 2 / math.factorial(17)
        expected = 2 * math.pi * (4 / abs(math.log(delta))) ** (p - 1) * bump
        assert beta_gradient_integral(delta, p) == pytest.approx(expected, rel=1e-8)

    def test_gradient_integral_finite_near_one(self):
        assert math.isfinite(beta_gradient_integral(0.9, 4))


class TestSerialization:
    def test_envelope(self):
        grid = build_annulus_grid(0.01 + 0.02j, 8, 8)
        form = ZeroOneForm(grid, random_smooth_sample(grid, np.random.default_rng(0)).values)
        doc = to_json_envelope(form)
        assert {'t_re', 't_im', 'n_r', 'n_theta', 'values'} <= set(doc)
        back = from_json_envelope(doc)
        assert isinstance(back, ZeroOneForm)
        np.testing.assert_array_equal(back.coeff, form.coeff)

    def test_norm_csv(self, tmp_path):
        path = tmp_path / 'norms.csv'
        write_norm_csv(str(path), [(0.01, 4, 1.5)])
        lines = path.read_text().splitlines()
        assert lines[0] == 't_abs,p,norm'
        assert lines[1].startswith('1.000000000000e-02,4,')
