import math

import numpy as np
import pytest

from app.core.exceptions import CutLocusError, UsageError
from app.services.manifolds import (
    cut_locus_query,
    d_r_log_theta_negsqrt,
    default_frame_point,
    distance,
    exp_map,
    get_manifold,
    grad_half_sq_dist,
    half_laplacian_sq_dist,
    log_map,
    parallel_transport_step,
    parse_point,
    theta_jacobian,
)
from app.utils.linalg import frame_defect
from tests.conftest import point

NORTH = point("sphere2", [0, 0, 1])
SOUTH = point("sphere2", [0, 0, -1])
EAST = point("sphere2", [1, 0, 0])
Y_AXIS = point("sphere2", [0, 1, 0])


class TestRegistry:
    """Manifold ids and point parsing."""

    def test_known_ids(self):
        assert get_manifold("sphere2").dim == 2
        assert get_manifold("sphere4").dim == 4
        assert get_manifold("cylinder").dim == 2
        assert get_manifold("flat-torus").dim == 2
        assert get_manifold("flat-torus3").dim == 3
        assert get_manifold("so3").dim == 3

    @pytest.mark.parametrize("bad", ["sphere1", "klein", "torus:1", "ellipsoid:1,x,2"])
    def test_rejects_bad_ids(self, bad):
        with pytest.raises(UsageError):
            get_manifold(bad)

    def test_named_points(self):
        sphere = get_manifold("sphere2")
        assert np.allclose(parse_point(sphere, "south"), [[0, 0, -1]])
        so3 = get_manifold("so3")
        assert np.allclose(parse_point(so3, "identity")[0], np.eye(3))
        quarter = parse_point(so3, f"rotvec:0,0,{math.pi / 2}")[0]
        assert np.allclose(quarter @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_sphere_input_is_projected(self):
        p = parse_point(get_manifold("sphere2"), "0,0,2")
        assert np.allclose(p, [[0, 0, 1]])

    def test_unparseable_point(self):
        with pytest.raises(UsageError):
            parse_point(get_manifold("sphere2"), "a,b,c")

    def test_mismatched_manifolds(self):
        with pytest.raises(UsageError):
            distance(NORTH, point("flat-torus", [0, 0]))


class TestSphere:
    """Closed forms on the 2-sphere."""

    def test_antipodal_distance(self):
        assert distance(NORTH, SOUTH) == pytest.approx(math.pi, abs=1e-12)

    def test_log_of_quarter_circle(self):
        w = log_map(EAST, Y_AXIS)
        assert not w.near_cut
        assert np.allclose(w.components, [0.0, math.pi / 2, 0.0], atol=1e-12)

    def test_exp_inverts_log(self):
        w = log_map(EAST, Y_AXIS)
        back = exp_map(EAST, w)
        assert np.allclose(back.coords, Y_AXIS.coords, atol=1e-12)

    def test_gradient_is_minus_log(self):
        g = grad_half_sq_dist(EAST, Y_AXIS)
        w = log_map(EAST, Y_AXIS)
        assert np.allclose(g.components, -np.asarray(w.components))

    def test_antipode_is_in_the_band(self):
        info = cut_locus_query(NORTH, SOUTH)
        assert info.is_near_cut
        assert info.distance_to_cut == 0.0
        w = log_map(NORTH, SOUTH)
        assert w.near_cut
        assert np.allclose(w.components, 0.0)

    def test_distance_to_cut(self):
        info = cut_locus_query(EAST, Y_AXIS)
        assert not info.is_near_cut
        assert info.distance_to_cut == pytest.approx(math.pi / 2)

    def test_radial_terms(self):
        r = math.pi / 2
        assert theta_jacobian(Y_AXIS, EAST) == pytest.approx(math.sin(r) / r)
        assert d_r_log_theta_negsqrt(Y_AXIS, EAST) == pytest.approx(-0.5 * (1.0 / math.tan(r) - 1.0 / r))
        assert half_laplacian_sq_dist(EAST, Y_AXIS) == pytest.approx(1.0 + r / math.tan(r))

    def test_radial_terms_near_the_target(self):
        r = 1e-6
        near = point("sphere2", [math.sin(r), 0.0, math.cos(r)])
        assert d_r_log_theta_negsqrt(NORTH, near) == pytest.approx(r / 6.0, rel=1e-6)
        assert theta_jacobian(NORTH, near) == pytest.approx(1.0, abs=1e-12)

    def test_radial_terms_refuse_the_cut_locus(self):
        with pytest.raises(CutLocusError):
            theta_jacobian(SOUTH, NORTH)

    def test_round_trip_random(self, rng):
        sphere = get_manifold("sphere3")
        x = sphere.random_point(rng, 50)
        w = sphere.random_tangent(rng, x, 2.5)
        assert np.max(np.abs(sphere.log(x, sphere.exp(x, w)) - w)) < 1e-9

    def test_finite_difference_gradient(self, rng):
        sphere = get_manifold("sphere2")
        x = sphere.random_point(rng, 20)
        v = sphere.exp(x, sphere.random_tangent(rng, x, 2.0))
        frame = sphere.default_frame(x)
        grad = -sphere.log(x, v)
        h = 1e-5
        for i in range(2):
            step = np.zeros((20, 2))
            step[:, i] = h
            up = 0.5 * sphere.distance(sphere.normal_chart(x, step, frame), v) ** 2
            down = 0.5 * sphere.distance(sphere.normal_chart(x, -step, frame), v) ** 2
            fd = (up - down) / (2 * h)
            assert np.max(np.abs(fd - np.sum(grad * frame[:, i, :], axis=-1))) < 1e-5


class TestFlatProducts:
    """Cylinder and flat torus."""

    def test_wrapped_distance(self):
        a = point("flat-torus", [0.1, 0.0])
        b = point("flat-torus", [2 * math.pi - 0.1, 0.0])
        assert distance(a, b) == pytest.approx(0.2)

    def test_cylinder_cut_distance(self):
        a = point("cylinder", [0.0, 0.0])
        b = point("cylinder", [2.0, 5.0])
        info = cut_locus_query(a, b)
        assert info.distance_to_cut == pytest.approx(math.pi - 2.0)

    def test_cylinder_cut_target(self):
        info = cut_locus_query(point("cylinder", [0.0, 0.0]), point("cylinder", [math.pi, 0.5]))
        assert info.is_near_cut

    def test_flat_radial_terms(self):
        a = point("flat-torus", [0.0, 0.0])
        b = point("flat-torus", [1.0, 1.0])
        assert theta_jacobian(b, a) == 1.0
        assert d_r_log_theta_negsqrt(b, a) == 0.0
        assert half_laplacian_sq_dist(a, b) == 2.0


class TestSO3:
    """Rotation group with the angle metric."""

    def test_distance_is_rotation_angle(self):
        so3 = get_manifold("so3")
        x = parse_point(so3, "identity")
        v = parse_point(so3, "rotvec:0.3,-0.2,0.5")
        assert so3.distance(x, v)[0] == pytest.approx(math.sqrt(0.09 + 0.04 + 0.25))

    def test_log_exp_round_trip(self, rng):
        so3 = get_manifold("so3")
        x = so3.random_point(rng, 30)
        w = so3.random_tangent(rng, x, 2.5)
        assert np.max(np.abs(so3.log(x, so3.exp(x, w)) - w)) < 1e-9

    def test_theta_closed_form(self):
        so3 = get_manifold("so3")
        r = np.array([0.5, 1.0, 2.0])
        assert np.allclose(so3.theta_r(r), (np.sin(r / 2) / (r / 2)) ** 2)

    def test_public_tangent_is_skew(self):
        x = point("so3", np.eye(3).ravel())
        v = point("so3", np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float).ravel())
        w = np.asarray(log_map(x, v).components).reshape(3, 3)
        assert np.allclose(w, -w.T)
        assert w[1, 0] == pytest.approx(math.pi / 2)


class TestFrames:
    """Frames and one-step parallel transport."""

    @pytest.mark.parametrize("manifold_id", ["sphere2", "sphere3", "so3", "flat-torus"])
    def test_default_frames_are_orthonormal(self, manifold_id, rng):
        m = get_manifold(manifold_id)
        x = m.random_point(rng, 10)
        assert np.max(frame_defect(m.default_frame(x))) < 1e-12

    def test_transport_step_keeps_frame_orthonormal(self):
        f = default_frame_point(EAST)
        w = log_map(EAST, Y_AXIS)
        moved = parallel_transport_step(f, w)
        assert np.allclose(moved.base.coords, Y_AXIS.coords, atol=1e-12)
        frame = np.asarray(moved.frame)
        assert np.allclose(frame @ frame.T, np.eye(2), atol=1e-10)
        assert np.allclose(frame @ np.asarray(Y_AXIS.coords), 0.0, atol=1e-10)

    def test_octant_loop_holonomy(self):
        # a loop enclosing one eighth of the sphere turns vectors by its area
        f = default_frame_point(NORTH)
        for corner in (EAST, Y_AXIS, NORTH):
            f = parallel_transport_step(f, log_map(f.base, corner))
        assert np.allclose(f.base.coords, NORTH.coords, atol=1e-12)
        before = np.asarray(default_frame_point(NORTH).frame)
        after = np.asarray(f.frame)
        cos_angle = float(after[0] @ before[0])
        sin_angle = float(np.cross(before[0], after[0]) @ np.asarray(NORTH.coords))
        assert abs(math.atan2(sin_angle, cos_angle)) == pytest.approx(math.pi / 2, abs=1e-9)
        assert np.allclose(after @ after.T, np.eye(2), atol=1e-10)

    def test_skewed_frame_rejected(self):
        f = default_frame_point(EAST)
        skewed = f.model_copy(update={"frame": [[0.0, 1.0, 0.0], [0.0, 0.6, 0.8]]})
        with pytest.raises(UsageError):
            parallel_transport_step(skewed, log_map(EAST, Y_AXIS))

    def test_transport_along_great_circle_rotates_velocity(self):
        # the unit velocity of a geodesic is parallel
        sphere = get_manifold("sphere2")
        x = np.array([[1.0, 0.0, 0.0]])
        w = np.array([[0.0, 1.0, 0.0]])
        moved = sphere.transport(x, w, w[:, None, :])
        assert np.allclose(moved[0, 0], [-math.sin(1.0), math.cos(1.0), 0.0])
