import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from hjbrep.errors import DomainError
from hjbrep.geometry import (BallIntersection, Polytope, boundary_normals, hausdorff,
                             min_norm_point, normal_cone, proj_map, sphere_directions, steiner,
                             support)

TRIANGLE = Polytope([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
SQUARE = Polytope([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _qp_project(vertices, y):
    """Independent projection oracle: minimize |V^T w - y| over the simplex."""
    k = len(vertices)
    res = minimize(lambda w: np.sum((w @ vertices - y) ** 2), np.full(k, 1.0 / k),
                   jac=lambda w: 2 * vertices @ (w @ vertices - y),
                   bounds=[(0, 1)] * k,
                   constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x @ vertices


def _dense_cap(center, radius, base, n=400):
    """Points of base ∩ disk on a dense grid, for a brute-force support oracle."""
    g = np.linspace(-3, 3, n)
    pts = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    inside = base.contains(pts) & (np.linalg.norm(pts - center, axis=1) <= radius)
    return pts[inside]


coords = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


class TestPolytope:
    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            Polytope(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            Polytope([[0.0, np.inf]])

    def test_redundant_points_dropped(self):
        P = Polytope([[0, 0], [1, 0], [0, 1], [0.2, 0.2], [0.5, 0.0]])
        assert len(P.vertices) == 3

    def test_degenerate_segment_in_plane(self):
        P = Polytope([[0, 0], [1, 1], [0.5, 0.5]])
        assert P.rank == 1
        np.testing.assert_allclose(P.project([1.0, 0.0]), [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(P.project([3.0, 2.0]), [1.0, 1.0], atol=1e-12)

    def test_support_of_square(self):
        val, pts = support(SQUARE, [1.0, 0.0])
        assert val == pytest.approx(1.0)
        # tie: minimal-norm point of the maximizing face
        np.testing.assert_allclose(SQUARE.support_points([1.0, 0.0]), [1.0, 0.0], atol=1e-12)

    def test_one_dimensional(self):
        P = Polytope([[-1.0], [2.0], [0.5]])
        np.testing.assert_allclose(P.vertices.ravel(), [-1.0, 2.0])
        assert P.project([5.0])[0] == pytest.approx(2.0)
        assert P.contains([0.0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(coords, coords), min_size=3, max_size=8), st.tuples(coords, coords))
    def test_projection_matches_qp_oracle(self, pts, y):
        pts = np.array(pts)
        P = Polytope(pts)
        y = np.array(y)
        ours = P.project(y)
        ref = _qp_project(P.vertices, y)
        assert np.linalg.norm(ours - y) <= np.linalg.norm(ref - y) + 1e-7
        assert P.contains(ours, 1e-8)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(coords, coords), min_size=3, max_size=8),
           st.tuples(coords, coords), st.tuples(coords, coords))
    def test_projection_nonexpansive(self, pts, a, b):
        P = Polytope(np.array(pts))
        a, b = np.array(a), np.array(b)
        assert np.linalg.norm(P.project(a) - P.project(b)) <= np.linalg.norm(a - b) + 1e-9


class TestHausdorff:
    def test_nested_squares(self):
        inner = Polytope(0.5 * SQUARE.vertices)
        assert hausdorff(SQUARE, inner) == pytest.approx(np.sqrt(2) / 2, abs=1e-12)

    def test_translation(self):
        assert hausdorff(TRIANGLE, Polytope(TRIANGLE.vertices + [0.3, -0.4])) == pytest.approx(0.5)

    def test_symmetric_and_zero(self):
        assert hausdorff(TRIANGLE, TRIANGLE) == pytest.approx(0.0, abs=1e-12)
        assert hausdorff(TRIANGLE, SQUARE) == pytest.approx(hausdorff(SQUARE, TRIANGLE))


class TestProjectionMap:
    def test_point_inside_gives_singleton(self):
        P = proj_map([0.2, 0.2], TRIANGLE)
        assert isinstance(P, Polytope) and len(P.vertices) == 1

    def test_radius_is_twice_distance(self):
        P = proj_map([2.0, 0.0], SQUARE)
        assert isinstance(P, BallIntersection)
        assert P.radius == pytest.approx(2.0)

    def test_cap_projection_path_matches_dykstra(self):
        rng = np.random.default_rng(3)
        cap = BallIntersection(TRIANGLE, [1.2, 1.0], 2 * TRIANGLE.distance([1.2, 1.0]))
        Y = rng.uniform(-2, 2, size=(40, 2))
        a = cap.project(Y)
        b = cap.project(Y, method="dykstra")
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_cap_support_exact_matches_bisection_and_grid(self):
        c = np.array([1.2, 1.0])
        cap = BallIntersection(TRIANGLE, c, 2 * TRIANGLE.distance(c))
        D = sphere_directions(2, 64)
        exact = cap.support_points(D)
        bis = cap.support_points(D, method="bisection")
        np.testing.assert_allclose(exact, bis, atol=1e-7)
        grid = _dense_cap(c, cap.radius, TRIANGLE)
        ours = np.einsum("ij,ij->i", exact, D)
        ref = (grid @ D.T).max(axis=0)
        assert np.all(ours >= ref - 1e-12)
        assert np.all(ours <= ref + 0.02)

    def test_ball_must_meet_base(self):
        with pytest.raises(DomainError):
            BallIntersection(TRIANGLE, [3.0, 3.0], 0.5)


class TestSteiner:
    def test_triangle_exterior_angle_oracle(self):
        # Steiner point of a polygon = sum of vertices weighted by exterior angle / 2π
        np.testing.assert_allclose(steiner(TRIANGLE), [3 / 8, 3 / 8], atol=1e-3)

    def test_interval_midpoint_and_square_center(self):
        assert steiner(Polytope([[-1.0], [3.0]]))[0] == pytest.approx(1.0, abs=1e-3)
        np.testing.assert_allclose(steiner(Polytope(SQUARE.vertices + [2.0, -1.0])),
                                   [2.0, -1.0], atol=1e-3)

    def test_cube_center_in_3d(self):
        g = np.array([[i, j, k] for i in (0, 1) for j in (0, 2) for k in (0, 3)], dtype=float)
        np.testing.assert_allclose(steiner(Polytope(g), budget=4096), [0.5, 1.0, 1.5], atol=2e-2)

    def test_membership_and_error_estimate(self):
        res = steiner(TRIANGLE, full=True)
        assert TRIANGLE.contains(res.point)
        assert res.error < 1e-3

    def test_equivariance_under_translation(self):
        shift = np.array([0.7, -2.0])
        a = steiner(TRIANGLE)
        b = steiner(Polytope(TRIANGLE.vertices + shift))
        np.testing.assert_allclose(b, a + shift, atol=1e-9)


class TestCones:
    def test_square_corner_normal_cone(self):
        N = normal_cone(SQUARE, [1.0, 1.0])
        assert N.contains([1.0, 1.0]) and N.contains([1.0, 0.0])
        assert not N.contains([-1.0, 0.2])

    def test_interior_normal_cone_trivial(self):
        assert normal_cone(SQUARE, [0.0, 0.0]).is_trivial

    def test_min_norm_point(self):
        np.testing.assert_allclose(min_norm_point(Polytope(TRIANGLE.vertices + 1.0)), [1, 1])
        assert np.all(min_norm_point(normal_cone(SQUARE, [1.0, 1.0])) == 0)

    def test_boundary_normals_are_unit_and_outward(self):
        N = boundary_normals(SQUARE, [0.95, 0.95], 0.1)
        np.testing.assert_allclose(np.linalg.norm(N, axis=1), 1.0)
        assert np.all(N @ np.array([1.0, 1.0]) > 0)
        assert len(boundary_normals(SQUARE, [0.0, 0.0], 0.1)) == 0
