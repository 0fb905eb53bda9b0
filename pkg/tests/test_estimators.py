import math
from dataclasses import replace

import numpy as np
import pytest

from app.core.exceptions import DegenerateWeightsError, UsageError
from app.models.bridge import BridgeConfig, DriverSpec
from app.services.estimators import (
    conditional_expectation,
    density_grid,
    density_profile,
    diffusion_mean,
    euclidean_kernel,
    flat_heat_kernel,
    geodesic_profile_targets,
    grid_cells,
    grid_mass,
    heat_kernel_bm,
    heat_kernel_targets,
    series_kernel,
    sphere_heat_kernel_series,
    transition_density_general,
    weighted_mean,
)
from app.services.manifolds import get_manifold
from app.services.sde_engine import sample_ensemble
from tests.conftest import point


def flat_config(**fields):
    base = dict(manifold_id="flat-torus", start=[1.0, 1.0], target=[2.0, 1.5], T=0.25, steps=50, paths=8, master_seed=9)
    base.update(fields)
    return BridgeConfig(**base)


class TestWeightedMean:
    """Self-normalized importance averages."""

    def test_equal_weights(self):
        est = weighted_mean([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        assert est.value == pytest.approx(2.0)
        assert est.ess == pytest.approx(3.0)
        assert est.std_error == pytest.approx(math.sqrt(2.0) / 3.0)
        assert not est.low_confidence

    def test_weights_are_shift_invariant(self):
        a = weighted_mean([1.0, 5.0], [0.0, math.log(3.0)])
        b = weighted_mean([1.0, 5.0], [800.0, 800.0 + math.log(3.0)])
        assert a.value == pytest.approx(4.0)
        assert b.value == pytest.approx(a.value)

    def test_common_weight_scale_cancels(self):
        values = [0.5, 2.0, -1.0, 4.0]
        log_w = [0.1, -0.7, 1.3, 0.0]
        base = weighted_mean(values, log_w)
        for shift in (math.log(1e-6), math.log(37.0)):
            scaled = weighted_mean(values, [lw + shift for lw in log_w])
            assert scaled.value == pytest.approx(base.value, rel=1e-12)
            assert scaled.ess == pytest.approx(base.ess, rel=1e-12)
            assert scaled.std_error == pytest.approx(base.std_error, rel=1e-12)

    def test_single_surviving_weight(self):
        est = weighted_mean([7.0, 1.0, 1.0], [0.0, -np.inf, -np.inf], paths=300)
        assert est.value == 7.0
        assert est.ess == pytest.approx(1.0)
        assert est.low_confidence

    def test_all_weights_zero(self):
        with pytest.raises(DegenerateWeightsError):
            weighted_mean([1.0, 2.0], [-np.inf, -np.inf])

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            weighted_mean([1.0, 2.0], [0.0])

    def test_conditional_expectation_of_path_functional(self):
        ensemble = sample_ensemble(flat_config())
        est = conditional_expectation(lambda path: path.terminal_radial, ensemble)
        # flat bridges carry unit weights
        assert est.value == pytest.approx(float(np.mean(ensemble.terminal_radials)))

    def test_conditional_expectation_ignores_common_weight_scale(self):
        cfg = BridgeConfig(manifold_id="sphere2", start=[0.0, 0.0, 1.0], target=[math.sin(2.0), 0.0, math.cos(2.0)],
                           T=1.0, steps=100, paths=16, master_seed=5, record="terminal")
        ensemble = sample_ensemble(cfg)
        assert np.ptp(ensemble.log_phi) > 0.0
        base = conditional_expectation(lambda path: path.terminal_state[0], ensemble)
        scaled = conditional_expectation(
            lambda path: path.terminal_state[0], replace(ensemble, log_phi=ensemble.log_phi + math.log(5.0))
        )
        assert scaled.value == pytest.approx(base.value, rel=1e-12)
        assert scaled.ess == pytest.approx(base.ess, rel=1e-12)

    def test_conditional_expectation_length_check(self):
        ensemble = sample_ensemble(flat_config())
        with pytest.raises(UsageError):
            conditional_expectation([1.0, 2.0], ensemble)


class TestClosedForms:
    """Reference kernels."""

    def test_euclidean_kernel(self):
        assert euclidean_kernel(0.0, 1.0, 2) == pytest.approx(1.0 / (2.0 * math.pi))
        assert euclidean_kernel(1.0, 0.5, 1) == pytest.approx(math.exp(-1.0) / math.sqrt(math.pi))

    def test_series_tends_to_uniform(self):
        assert series_kernel(2, 0.3, 5.0) == pytest.approx(1.0 / (4.0 * math.pi), rel=1e-3)
        assert series_kernel(3, -0.2, 5.0) == pytest.approx(1.0 / (2.0 * math.pi ** 2), rel=1e-3)

    def test_series_short_time_diagonal(self):
        t = 0.01
        value = float(series_kernel(2, 1.0, t, l_max=200))
        assert value == pytest.approx((1.0 + t / 3.0) / (4.0 * math.pi * t), rel=1e-3)

    def test_series_rejects_bad_arguments(self):
        with pytest.raises(UsageError):
            series_kernel(2, 1.0, 0.0)
        with pytest.raises(UsageError):
            series_kernel(2, 1.0, 1.0, l_max=-1)

    def test_brownian_time_halves_t(self):
        north = point("sphere2", [0, 0, 1])
        east = point("sphere2", [1, 0, 0])
        assert sphere_heat_kernel_series(north, east, 1.0, brownian_time=True) == pytest.approx(
            sphere_heat_kernel_series(north, east, 0.5)
        )

    def test_series_needs_a_sphere(self):
        with pytest.raises(UsageError):
            sphere_heat_kernel_series(point("flat-torus", [0, 0]), point("flat-torus", [1, 0]), 1.0)

    def test_cylinder_image_sum(self):
        x = point("cylinder", [0.0, 0.0])
        assert flat_heat_kernel(x, x, 0.5) == pytest.approx(1.0 / math.pi, rel=1e-9)

    def test_torus_image_sum_is_periodic(self):
        x = point("flat-torus", [0.0, 0.0])
        a = flat_heat_kernel(x, point("flat-torus", [0.5, 0.0]), 2.0)
        b = flat_heat_kernel(x, point("flat-torus", [2 * math.pi - 0.5, 0.0]), 2.0)
        assert a == pytest.approx(b)

    def test_image_sum_needs_flat_manifold(self):
        with pytest.raises(UsageError):
            flat_heat_kernel(point("sphere2", [0, 0, 1]), point("sphere2", [1, 0, 0]), 1.0)


class TestHeatKernel:
    """Density estimates from guided ensembles."""

    def test_flat_estimate_is_exact(self):
        cfg = flat_config()
        est = heat_kernel_bm(point("flat-torus", cfg.start), point("flat-torus", cfg.target), cfg.T, sample_ensemble(cfg))
        r0 = math.hypot(1.0, 0.5)
        assert est.value == pytest.approx(euclidean_kernel(r0, cfg.T, 2))
        assert est.std_error == 0.0
        assert est.reference == pytest.approx(est.value, rel=1e-6)

    def test_horizon_mismatch(self):
        cfg = flat_config()
        with pytest.raises(UsageError):
            heat_kernel_bm(point("flat-torus", cfg.start), point("flat-torus", cfg.target), 1.0, sample_ensemble(cfg))

    def test_needs_brownian_accumulator(self):
        cfg = flat_config(likelihood="none")
        with pytest.raises(UsageError):
            heat_kernel_bm(point("flat-torus", cfg.start), point("flat-torus", cfg.target), cfg.T, sample_ensemble(cfg))

    def test_sphere_estimate_matches_series(self):
        target = [math.sin(1.0), 0.0, math.cos(1.0)]
        cfg = BridgeConfig(manifold_id="sphere2", start=[0.0, 0.0, 1.0], target=target, T=1.0,
                           steps=200, paths=400, master_seed=21)
        est = heat_kernel_bm(point("sphere2", cfg.start), point("sphere2", target), cfg.T, sample_ensemble(cfg))
        assert est.reference is not None
        assert abs(est.value - est.reference) < 0.1 * est.reference + 3.0 * est.std_error

    @pytest.mark.parametrize("T", [0.5, 2.0])
    def test_sphere_estimates_across_horizons(self, T):
        cfg = BridgeConfig(manifold_id="sphere2", start=[0.0, 0.0, 1.0], target=[0.0, 0.0, -1.0], T=T,
                           steps=200, paths=1000, master_seed=23)
        targets = np.array([[math.sin(1.0), 0.0, math.cos(1.0)], [0.0, 0.0, -1.0]])
        interior, antipode = heat_kernel_targets(cfg, targets)
        assert abs(interior.value - interior.reference) < 0.1 * interior.reference + 3.0 * interior.std_error
        # the cut locus local time is not accumulated, hence the wider band
        assert abs(antipode.value - antipode.reference) < 0.15 * antipode.reference + 3.0 * antipode.std_error

    def test_general_density_for_constant_dispersion(self):
        spec = DriverSpec.constant([[1.2, 0.0], [0.0, 1.0]])
        cfg = flat_config(likelihood="general")
        est = transition_density_general(
            point("flat-torus", cfg.start), point("flat-torus", cfg.target), cfg.T, sample_ensemble(cfg, spec), spec
        )
        cov = np.diag([1.44, 1.0]) * cfg.T
        y = np.array([1.0, 0.5])
        expected = math.exp(-0.5 * y @ np.linalg.solve(cov, y)) / (2.0 * math.pi * math.sqrt(np.linalg.det(cov)))
        assert est.value == pytest.approx(expected, rel=1e-6)

    def test_general_density_needs_general_accumulator(self):
        cfg = flat_config()
        with pytest.raises(UsageError):
            transition_density_general(
                point("flat-torus", cfg.start), point("flat-torus", cfg.target), cfg.T,
                sample_ensemble(cfg), DriverSpec.brownian(2),
            )

    def test_batched_targets(self):
        cfg = flat_config(paths=4)
        targets = np.array([[2.0, 1.5], [1.0, 2.0], [1.5, 1.5]])
        estimates = heat_kernel_targets(cfg, targets)
        assert len(estimates) == 3
        assert estimates[1].radial == pytest.approx(1.0)
        assert all(e.reference is not None for e in estimates)

    def test_batched_targets_need_targets(self):
        with pytest.raises(UsageError):
            heat_kernel_targets(flat_config(), np.zeros((0, 2)))


class TestProfilesAndGrids:
    """Profiles along geodesics and chart grids."""

    def test_default_sphere_profile_runs_pole_to_pole(self):
        sphere = get_manifold("sphere2")
        pts, arcs = geodesic_profile_targets(sphere, np.array([[0.0, 0.0, 1.0]]), n=5)
        assert np.allclose(arcs, np.linspace(0.0, math.pi, 5))
        assert np.allclose(pts[0], [0, 0, 1])
        assert np.allclose(pts[-1], [0, 0, -1], atol=1e-12)

    def test_profile_towards_end_point(self):
        torus = get_manifold("flat-torus")
        pts, arcs = geodesic_profile_targets(torus, np.array([[1.0, 1.0]]), end=np.array([[2.0, 1.0]]), n=3)
        assert np.allclose(pts, [[1.0, 1.0], [1.5, 1.0], [2.0, 1.0]])
        assert arcs[-1] == pytest.approx(1.0)

    def test_sphere_profile_rows(self):
        cfg = BridgeConfig(manifold_id="sphere2", start=[0.0, 0.0, 1.0], target=[0.0, 0.0, 1.0], T=1.0,
                           steps=50, paths=16, master_seed=2)
        end = np.array([[math.sin(1.5), 0.0, math.cos(1.5)]])
        rows = density_profile(cfg, end=end, points=3)
        assert len(rows) == 3
        assert rows[0].arc_length == 0.0
        assert all(row.series is not None and row.series > 0.0 for row in rows)
        assert rows[2].euclidean == pytest.approx(euclidean_kernel(1.5, 1.0, 2))

    def test_sphere_cell_weights_cover_area(self):
        _, pts, weights = grid_cells(get_manifold("sphere2"), np.array([[0.0, 0.0, 1.0]]), 1.0, 20)
        assert weights.sum() == pytest.approx(4.0 * math.pi, rel=1e-2)
        assert np.allclose(np.linalg.norm(pts, axis=-1), 1.0)

    def test_flat_torus_cell_weights(self):
        _, _, weights = grid_cells(get_manifold("flat-torus"), np.array([[1.0, 1.0]]), 1.0, 8)
        assert weights.sum() == pytest.approx(4.0 * math.pi ** 2)

    def test_embedded_torus_cell_weights(self):
        _, _, weights = grid_cells(get_manifold("torus:3,1"), None, 1.0, 16)
        assert weights.sum() == pytest.approx(12.0 * math.pi ** 2, rel=1e-6)

    def test_grid_needs_two_dimensions(self):
        with pytest.raises(UsageError):
            grid_cells(get_manifold("so3"), None, 1.0, 8)

    def test_flat_grid_mass(self):
        rows = density_grid(flat_config(T=0.3, paths=2, steps=10), resolution=16)
        assert len(rows) == 256
        assert grid_mass(rows) == pytest.approx(1.0, abs=0.02)


class TestDiffusionMean:
    """Likelihood maximization over the manifold."""

    def test_flat_mean_is_the_centroid(self):
        data = [point("flat-torus", c) for c in ([2.3, 2.0], [1.7, 2.0], [2.0, 2.3], [2.0, 1.7])]
        est = diffusion_mean(data, 1.0, initial=point("flat-torus", [2.3, 2.2]), steps=10,
                             paths_per_datum=2, max_iters=5, tol=1e-4, seed=4)
        assert est.converged
        assert np.allclose(est.iterates[-1].coords, [2.0, 2.0], atol=1e-6)
        assert est.iterations <= 2
        assert len(est.iterates) == len(est.log_likelihoods) == len(est.step_sizes)
        assert all(b >= a for a, b in zip(est.log_likelihoods, est.log_likelihoods[1:]))

    def test_sphere_mean_climbs_to_the_pole(self):
        polar = 0.3
        data = [
            point("sphere2", [math.sin(polar) * math.cos(a), math.sin(polar) * math.sin(a), math.cos(polar)])
            for a in (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)
        ]
        start = point("sphere2", [math.sin(0.4), 0.0, math.cos(0.4)])
        est = diffusion_mean(data, 0.2, initial=start, steps=50, paths_per_datum=4, max_iters=8, tol=0.05, seed=7)
        final = np.asarray(est.iterates[-1].coords)
        assert np.linalg.norm(final) == pytest.approx(1.0)
        assert math.acos(min(1.0, final[2])) < 0.15
        assert est.iterations >= 1
        assert all(b >= a - 1e-9 for a, b in zip(est.log_likelihoods, est.log_likelihoods[1:]))

    def test_needs_data(self):
        with pytest.raises(UsageError):
            diffusion_mean([], 1.0)

    def test_needs_positive_time(self):
        with pytest.raises(UsageError):
            diffusion_mean([point("flat-torus", [1, 1])], 0.0)

    def test_mixed_manifolds(self):
        with pytest.raises(UsageError):
            diffusion_mean([point("flat-torus", [1, 1]), point("cylinder", [1, 1])], 1.0)
