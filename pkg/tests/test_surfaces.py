import math

import numpy as np
import pytest

from app.core.exceptions import DegenerateMetricError, UsageError
from app.db.geodesic_cache import geodesic_cache
from app.services.manifolds import get_manifold, parse_point
from app.services.surfaces import (
    EmbeddedTorus,
    Ellipsoid,
    build_surface,
    geodesic_bvp,
    integrate_jacobi,
    jacobi_theta,
    surface_metric,
)


@pytest.fixture
def torus():
    return get_manifold("torus:3,1")


@pytest.fixture
def round_ellipsoid():
    return get_manifold("ellipsoid:1,1,1")


class TestConstruction:
    """Surface ids and parameter validation."""

    def test_build_from_kind(self):
        assert isinstance(build_surface("torus", [3, 1]), EmbeddedTorus)
        assert isinstance(build_surface("ellipsoid", [1, 2, 3]), Ellipsoid)

    def test_rejects_bad_parameters(self):
        with pytest.raises(UsageError):
            build_surface("torus", [1, 3])
        with pytest.raises(UsageError):
            build_surface("ellipsoid", [1, 2])
        with pytest.raises(UsageError):
            build_surface("ellipsoid", [1, -2, 3])

    def test_chart_points_parse(self, torus):
        p = parse_point(torus, "chart:0,0")
        assert np.allclose(p, [[4.0, 0.0, 0.0]])

    def test_off_surface_points_are_rejected(self, torus):
        with pytest.raises(UsageError):
            torus.validate_point(np.array([[1.0, 0.0, 0.0]]))

    def test_chart_round_trip(self, torus, rng):
        q = rng.uniform(0.0, 2 * math.pi, size=(25, 2))
        assert np.allclose(torus.chart_of(torus.embed(q)), q, atol=1e-12)


class TestMetricAndCurvature:
    """Induced metric and Gaussian curvature."""

    def test_torus_metric(self):
        g = surface_metric("torus:3,1", [0.3, 0.7])
        assert g[0, 0] == pytest.approx((3.0 + math.cos(0.7)) ** 2)
        assert g[1, 1] == pytest.approx(1.0)
        assert g[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_sphere_metric(self):
        g = surface_metric("ellipsoid:1,1,1", [1.0, 2.0])
        assert np.allclose(g, np.diag([1.0, math.sin(1.0) ** 2]))

    def test_degenerate_chart_point(self):
        with pytest.raises(DegenerateMetricError):
            surface_metric("ellipsoid:1,1,1", [0.0, 0.3])

    def test_torus_curvature(self, torus):
        q = np.array([[0.0, 0.0], [0.0, math.pi], [1.0, 0.5]])
        k = torus.gaussian_curvature(torus.embed(q))
        expected = np.cos(q[:, 1]) / (1.0 * (3.0 + np.cos(q[:, 1])))
        assert np.allclose(k, expected, atol=1e-10)

    def test_round_ellipsoid_curvature(self, round_ellipsoid, rng):
        p = round_ellipsoid.random_point(rng, 10)
        assert np.allclose(round_ellipsoid.gaussian_curvature(p), 1.0)


class TestGeodesics:
    """Shooting, boundary value problems and Jacobi fields."""

    def test_outer_equator_arc(self):
        g = geodesic_bvp("torus:3,1", [0.0, 0.0], [0.5, 0.0])
        assert g.converged
        assert g.length == pytest.approx(2.0, abs=1e-5)
        assert g.residual < 1e-5
        assert not g.near_cut

    def test_round_ellipsoid_matches_sphere(self):
        x, v = np.array([1.0, 0.0]), np.array([1.3, 1.1])
        g = geodesic_bvp("ellipsoid:1,1,1", x, v)
        sphere = get_manifold("ellipsoid:1,1,1")
        px, pv = sphere.embed(x[None])[0], sphere.embed(v[None])[0]
        assert g.length == pytest.approx(math.acos(np.clip(px @ pv, -1, 1)), abs=1e-5)

    def test_coincident_endpoints(self):
        with pytest.raises(UsageError):
            geodesic_bvp("torus:3,1", [0.2, 0.2], [0.2, 0.2])

    def test_jacobi_theta_constant_curvature(self):
        # K = 1/4 along the outer equator
        g = geodesic_bvp("torus:3,1", [0.0, 0.0], [0.5, 0.0])
        assert jacobi_theta("torus:3,1", g) == pytest.approx(math.sin(1.0), abs=1e-6)

    def test_integrate_jacobi_flat_and_round(self):
        r = np.array([1.5])
        y, yp, conjugate = integrate_jacobi(np.zeros((1, 41)), r, 20)
        assert y[0] == pytest.approx(1.5)
        assert yp[0] == pytest.approx(1.0)
        y, yp, conjugate = integrate_jacobi(np.ones((1, 41)), r, 20)
        assert y[0] == pytest.approx(math.sin(1.5), abs=1e-7)
        assert yp[0] == pytest.approx(math.cos(1.5), abs=1e-7)
        assert not conjugate[0]

    def test_jacobi_flags_conjugate_points(self):
        _, _, conjugate = integrate_jacobi(np.ones((1, 41)), np.array([3.5]), 20)
        assert conjugate[0]

    def test_log_exp_round_trip(self, torus, rng):
        x = torus.embed(rng.uniform(0.0, 2 * math.pi, size=(5, 2)))
        w = torus.random_tangent(rng, x, 1.0)
        v = torus.exp(x, w)
        rad = torus.radial(x, v)
        assert np.max(np.abs(rad.log - w)) < 1e-6

    def test_search_populates_the_cache(self, torus):
        x = torus.embed(np.array([[0.0, 0.0]]))
        v = torus.embed(np.array([[0.4, 0.2]]))
        torus.search(x, v)
        assert len(geodesic_cache) == 1
        torus.search(x, v)
        assert geodesic_cache.hits >= 1
