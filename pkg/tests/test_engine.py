import math

import numpy as np
import pytest

from app.core.exceptions import EnsembleError, PathError, UsageError
from app.models.bridge import BridgeConfig, DriverSpec
from app.services.manifolds import default_frame_point
from app.services.sde_engine import (
    cap_drift,
    develop_step,
    guided_drift,
    resolve_likelihood,
    run_ensemble,
    sample_driver_increment,
    sample_endpoints,
    sample_ensemble,
    simulate_path,
    time_grid,
)
from tests.conftest import point


def flat_config(**fields):
    base = dict(
        manifold_id="flat-torus",
        start=[1.0, 1.0],
        target=[2.0, 1.5],
        T=0.5,
        steps=100,
        paths=8,
        master_seed=3,
    )
    base.update(fields)
    return BridgeConfig(**base)


def nan_driver(dimension=2):
    return DriverSpec(
        dimension=dimension,
        drift=lambda t, z: np.full_like(z, np.nan),
        sigma_matrix=np.eye(dimension).tolist(),
        name="broken",
    )


class TestTimeGrid:
    """Grids stop one interval short of the horizon."""

    def test_uniform(self):
        times = time_grid(2.0, 4)
        assert np.allclose(times, [0.0, 0.5, 1.0, 1.5])

    def test_geometric(self):
        times = time_grid(1.0, 10, "geometric")
        assert times[0] == 0.0
        assert times[-1] == pytest.approx(0.9)
        gaps = np.diff(times)
        assert np.all(gaps[1:] < gaps[:-1])

    @pytest.mark.parametrize("args", [(0.0, 10), (1.0, 1), (1.0, 10, "chebyshev")])
    def test_rejects_bad_grids(self, args):
        with pytest.raises(UsageError):
            time_grid(*args)


class TestSingleStep:
    """Public one-step operations."""

    def test_brownian_increment_scales_noise(self):
        dZ = sample_driver_increment(DriverSpec.brownian(2), 0.0, [0, 0], 0.25, noise=[1.0, -2.0])
        assert np.allclose(dZ, [0.5, -1.0])

    def test_constant_driver_increment(self):
        spec = DriverSpec.constant([[2.0, 0.0], [0.0, 1.0]], drift_vector=[1.0, 0.0])
        dZ = sample_driver_increment(spec, 0.0, [0, 0], 0.25, noise=[1.0, 1.0])
        assert np.allclose(dZ, [1.25, 0.5])

    def test_increment_needs_positive_dt(self):
        with pytest.raises(UsageError):
            sample_driver_increment(DriverSpec.brownian(2), 0.0, [0, 0], 0.0)

    def test_develop_on_flat_torus(self):
        f = default_frame_point(point("flat-torus", [1.0, 1.0]))
        moved = develop_step(f, [0.5, 0.25])
        assert np.allclose(moved.base.coords, [1.5, 1.25])
        assert np.allclose(moved.frame, np.eye(2))

    def test_develop_checks_dimension(self):
        f = default_frame_point(point("flat-torus", [1.0, 1.0]))
        with pytest.raises(UsageError):
            develop_step(f, [0.5, 0.25, 0.0])

    def test_guided_drift(self):
        f = default_frame_point(point("flat-torus", [0.0, 0.0]))
        drift = guided_drift(f, point("flat-torus", [1.0, 1.0]), 0.0, 2.0)
        assert np.allclose(drift, [0.5, 0.5])
        capped = guided_drift(f, point("flat-torus", [1.0, 1.0]), 0.0, 2.0, drift_cap=0.5)
        assert np.linalg.norm(capped) == pytest.approx(0.5)

    def test_guided_drift_at_horizon(self):
        f = default_frame_point(point("flat-torus", [0.0, 0.0]))
        with pytest.raises(UsageError):
            guided_drift(f, point("flat-torus", [1.0, 1.0]), 2.0, 2.0)

    def test_cap_reports_capped_rows(self):
        capped, over = cap_drift(np.array([[3.0, 4.0], [0.1, 0.0]]), 1.0)
        assert over.tolist() == [True, False]
        assert np.allclose(capped[0], [0.6, 0.8])


class TestLikelihoodModes:
    """Resolution of the likelihood accumulators."""

    def test_auto(self):
        assert resolve_likelihood(flat_config(), DriverSpec.brownian(2)) == "bm"
        general = DriverSpec.constant([[2.0, 0.0], [0.0, 1.0]])
        assert resolve_likelihood(flat_config(), general) == "general"

    def test_brownian_accumulator_needs_brownian_driver(self):
        general = DriverSpec.constant([[2.0, 0.0], [0.0, 1.0]])
        with pytest.raises(UsageError):
            resolve_likelihood(flat_config(likelihood="both"), general)


class TestEnsemble:
    """Batched simulation of guided bridges."""

    def test_reproducible(self):
        a = run_ensemble(flat_config())
        b = run_ensemble(flat_config())
        assert np.array_equal(a.terminal_states, b.terminal_states)

    def test_chunking_does_not_change_paths(self):
        whole = run_ensemble(flat_config(paths=10, chunk_size=100, workers=1))
        split = run_ensemble(flat_config(paths=10, chunk_size=3, workers=3))
        assert np.array_equal(whole.terminal_states, split.terminal_states)
        assert np.array_equal(whole.log_phi, split.log_phi)

    def test_single_path_matches_ensemble_row(self):
        ensemble = run_ensemble(flat_config(paths=4))
        single = simulate_path(flat_config(paths=4), path_index=2)
        assert np.array_equal(single.terminal_state, ensemble[2].terminal_state)
        assert single.path_index == 2

    def test_seeds_differ(self):
        a = run_ensemble(flat_config(master_seed=1))
        b = run_ensemble(flat_config(master_seed=2))
        assert not np.array_equal(a.terminal_states, b.terminal_states)

    def test_flat_bridge_has_trivial_likelihood(self):
        ensemble = sample_ensemble(flat_config(likelihood="both"))
        assert np.all(ensemble.log_phi == 0.0)
        # the discrete guided step is exact in flat space
        assert np.max(np.abs(ensemble.log_phi_general)) < 1e-9
        assert np.all(ensemble.cut_crossings == 0)

    def test_flat_bridge_midpoint_covariance(self):
        cfg = flat_config(start=[3.0, 3.0], target=[4.0, 3.5], T=1.0, steps=200, paths=2000, record="full")
        ensemble = sample_ensemble(cfg)
        mid = ensemble.states[:, 100]
        assert ensemble.times[100] == pytest.approx(0.5)
        cov = np.cov(mid.T)
        m = cfg.paths
        # Brownian bridge at T/2 has covariance (T/4) I
        variance_se = 0.25 * math.sqrt(2.0 / (m - 1))
        assert np.allclose(np.diag(cov), 0.25, atol=3.0 * variance_se + 0.005)
        assert abs(cov[0, 1]) < 3.0 * 0.25 / math.sqrt(m)
        assert np.allclose(mid.mean(axis=0), [3.5, 3.25], atol=3.0 * 0.5 / math.sqrt(m))

    def test_bridge_reaches_target(self):
        ensemble = sample_ensemble(flat_config(paths=32, steps=200))
        assert np.median(ensemble.terminal_radials) < 0.2

    def test_sphere_bridge_reaches_target(self):
        cfg = BridgeConfig(
            manifold_id="sphere2",
            start=[0.0, 0.0, 1.0],
            target=[math.sin(2.0), 0.0, math.cos(2.0)],
            T=1.0,
            steps=200,
            paths=32,
            master_seed=11,
        )
        ensemble = sample_ensemble(cfg)
        assert np.median(ensemble.terminal_radials) < 0.2
        assert np.allclose(np.linalg.norm(ensemble.terminal_states, axis=-1), 1.0)
        assert np.all(np.isfinite(ensemble.log_phi))

    def test_unguided_paths_wander(self):
        guided = sample_ensemble(flat_config(paths=32))
        free = sample_ensemble(flat_config(paths=32, guided=False))
        assert np.median(free.terminal_radials) > np.median(guided.terminal_radials)

    def test_record_modes(self):
        full = sample_ensemble(flat_config(record="full", paths=3, steps=20))
        assert full.states.shape == (3, 20, 2)
        assert full.increments.shape == (3, 19, 2)
        assert full.radials.shape == (3, 20)
        summary = sample_ensemble(flat_config(record="summary", paths=3, steps=20))
        assert summary.states is None
        assert summary.log_phi_partial.shape == (3, 20)
        terminal = sample_ensemble(flat_config(record="terminal", paths=3, steps=20))
        assert terminal.radials is None

    def test_full_record_follows_increments(self):
        path = sample_ensemble(flat_config(record="full", paths=1, steps=10))[0]
        moved = (path.states[0] + path.increments.sum(axis=0)) % (2 * math.pi)
        assert np.allclose(moved, path.terminal_state)

    def test_drift_cap_counts_steps(self):
        ensemble = sample_ensemble(flat_config(drift_cap=0.5, paths=4))
        assert np.all(ensemble.capped_steps > 0)

    def test_per_row_targets(self):
        targets = np.array([[2.0, 1.5], [1.5, 2.0]])
        ensemble = sample_ensemble(flat_config(paths=2, steps=200), targets=targets)
        assert np.linalg.norm(ensemble.terminal_states[0] - targets[0]) < 0.5
        assert np.linalg.norm(ensemble.terminal_states[1] - targets[1]) < 0.5

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            run_ensemble(flat_config(), DriverSpec.brownian(3))


class TestFailures:
    """Non-finite rows are frozen and reported."""

    def test_run_ensemble_keeps_failed_rows(self):
        ensemble = run_ensemble(flat_config(likelihood="none", paths=3), nan_driver())
        assert not ensemble.ok.any()
        assert np.all(ensemble.failed_steps == 0)
        assert np.allclose(ensemble.terminal_states, [1.0, 1.0])

    def test_sample_ensemble_raises_with_partial_result(self):
        with pytest.raises(EnsembleError) as excinfo:
            sample_ensemble(flat_config(likelihood="none", paths=3), nan_driver())
        assert len(excinfo.value.failures) == 3
        assert excinfo.value.ensemble is not None
        assert excinfo.value.failed_indices == [0, 1, 2]

    def test_simulate_path_raises_path_error(self):
        with pytest.raises(PathError):
            simulate_path(flat_config(likelihood="none"), nan_driver(), path_index=5)


class TestEndpoints:
    """Unconditioned endpoint sampling."""

    def test_shape_and_spread(self):
        ends = sample_endpoints(BridgeConfig(manifold_id="cylinder", start=[0.0, 0.0], target=[0.0, 0.0],
                                             T=0.5, steps=20, paths=200, master_seed=5))
        assert ends.shape == (200, 2)
        # axial coordinate has variance T
        assert np.var(ends[:, 1]) == pytest.approx(0.5, rel=0.3)
