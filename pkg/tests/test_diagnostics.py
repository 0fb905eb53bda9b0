import math
from types import SimpleNamespace
from unittest.mock import patch

import numpy as np
import pytest

from app.core.exceptions import LikelihoodError, UsageError
from app.services import diagnostics
from app.services.diagnostics import (
    SCALES,
    CheckContext,
    check_euclidean_reduction,
    check_geometry,
    check_importance_identity,
    check_l2_bound,
    check_likelihood_consistency,
    check_radial_ito,
    radial_residuals,
    run_checks,
    run_suite,
)


class TestCheckContext:
    """Scale tables and config building."""

    def test_scales_share_keys(self):
        assert set(SCALES["quick"]) == set(SCALES["acceptance"])

    def test_unknown_scale(self):
        with pytest.raises(UsageError):
            CheckContext("huge", 1)

    def test_config_resolves_named_points(self):
        ctx = CheckContext("quick", 7, drift_sign=-1.0)
        cfg = ctx.config("sphere2", "north", "south", T=1.0, steps=10)
        assert cfg.start == [0.0, 0.0, 1.0]
        assert cfg.target == [0.0, 0.0, -1.0]
        assert cfg.master_seed == 7
        assert cfg.drift_sign == -1.0


class TestRunner:
    """Suite dispatch, timing and failure capture."""

    def test_passing_suite(self):
        with patch.dict(diagnostics.SUITES, {"geometry": lambda ctx: (True, {"x": 1.0})}):
            result = run_suite("geometry", CheckContext("quick", 1))
        assert result.passed
        assert result.metrics == {"x": 1.0}
        assert result.error is None
        assert result.duration_ms >= 0.0

    def test_exceptions_fail_the_suite(self):
        def boom(ctx):
            raise LikelihoodError("non-finite increment", step=3)

        with patch.dict(diagnostics.SUITES, {"geometry": boom}):
            result = run_suite("geometry", CheckContext("quick", 1))
        assert not result.passed
        assert "LikelihoodError" in result.error

    def test_unknown_suite(self):
        with pytest.raises(UsageError):
            run_suite("nope", CheckContext("quick", 1))

    def test_report_collects_selected_suites(self):
        fake = {"geometry": lambda ctx: (True, {}), "l2_bound": lambda ctx: (False, {})}
        with patch.dict(diagnostics.SUITES, fake):
            report = run_checks(seed=5, suites=["geometry", "l2_bound"])
        assert not report.passed
        assert [s.name for s in report.suites] == ["geometry", "l2_bound"]
        assert report.seed == 5
        assert report.scale == "quick"

    def test_report_rejects_unknown_names(self):
        with pytest.raises(UsageError):
            run_checks(suites=["geometry", "typo"])


class TestSuites:
    """Real suites at quick scale."""

    def test_geometry_passes(self):
        passed, metrics = check_geometry(CheckContext("quick", 11))
        assert passed, metrics
        assert metrics["jacobi.theta"] < 1e-6

    def test_euclidean_reduction_passes(self):
        passed, metrics = check_euclidean_reduction(CheckContext("quick", 11))
        assert passed, metrics
        assert metrics["max_abs_log_phi"] == 0.0

    def test_reversed_drift_is_caught(self):
        passed, metrics = check_euclidean_reduction(CheckContext("quick", 11, drift_sign=-1.0))
        assert not passed
        assert metrics["median_terminal_radial"] > 0.05

    def test_brownian_and_general_accumulators_agree(self):
        passed, metrics = check_likelihood_consistency(CheckContext("quick", 11))
        assert passed, metrics
        assert metrics["fraction_within"] >= 0.9

    def test_importance_identity(self):
        passed, metrics = check_importance_identity(CheckContext("quick", 11))
        assert passed, metrics

    def test_l2_bound_holds(self):
        passed, metrics = check_l2_bound(CheckContext("quick", 11))
        assert passed, metrics
        assert metrics["t0.5.mean_r2"] <= metrics["t0.5.bound"]

    def test_radial_residual_variance(self):
        passed, metrics = check_radial_ito(CheckContext("quick", 11))
        assert passed, metrics
        assert metrics["residual_variance_ratio"] == pytest.approx(1.0, abs=0.05)
        assert metrics["residual_count"] > 10000


class TestRadialResiduals:
    """Residuals of recorded radial processes."""

    def test_steps_near_target_and_cut_are_dropped(self):
        ensemble = SimpleNamespace(
            manifold_id="sphere2",
            times=np.array([0.0, 0.1, 0.2, 0.3]),
            radials=np.array([[0.1, 1.0, 3.0, 1.2]]),
        )
        residuals = radial_residuals(ensemble)
        assert residuals.shape == (1,)
        expected = 3.0 - 1.0 - 0.5 * (1.0 / math.tan(1.0)) * 0.1
        assert residuals[0] == pytest.approx(expected)

    def test_flat_residuals_are_plain_increments(self):
        ensemble = SimpleNamespace(
            manifold_id="flat-torus",
            times=np.array([0.0, 0.5, 1.0]),
            radials=np.array([[1.0, 1.5, 0.9]]),
        )
        # Lap(r) = 1/r in two flat dimensions
        expected = [0.5 - 0.25 / 1.0, -0.6 - 0.25 / 1.5]
        assert np.allclose(radial_residuals(ensemble), expected)
