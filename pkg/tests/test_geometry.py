"""Geometry: angle conventions, rotation invariants, consistency check."""

import numpy as np
import pytest

from gazeclr.exceptions import (
    DegeneratePoleError,
    InsufficientViewsError,
    InvalidDirectionError,
    InvariantViolationError,
)
from gazeclr.geometry import (
    GazeDirection,
    RotationMatrix,
    angular_error_deg,
    angular_error_deg_arrays,
    axis_angle_rotation,
    check_multiview_consistency,
    effective_rotation,
    pitch_yaw_arrays_to_vectors,
    pitch_yaw_to_vector,
    random_rotation,
    vector_to_pitch_yaw,
)


class TestPitchYawConvention:
    def test_zero_angles_map_to_negative_z(self):
        g = pitch_yaw_to_vector(0.0, 0.0)
        np.testing.assert_allclose(g.vector, [0.0, 0.0, -1.0], atol=1e-15)

    def test_positive_pitch_looks_up(self):
        # y is down in camera coordinates, so looking up means negative y.
        g = pitch_yaw_to_vector(0.3, 0.0)
        assert g.vector[1] < 0

    def test_positive_yaw_moves_toward_negative_x(self):
        g = pitch_yaw_to_vector(0.0, 0.3)
        assert g.vector[0] < 0

    def test_round_trip_over_grid(self):
        pitches = np.linspace(-1.4, 1.4, 11)
        yaws = np.linspace(-3.0, 3.0, 13)
        for p in pitches:
            for y in yaws:
                p2, y2 = vector_to_pitch_yaw(pitch_yaw_to_vector(p, y))
                assert abs(p2 - p) < 1e-9
                assert abs(y2 - y) < 1e-9

    def test_vectors_are_unit(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            p = rng.uniform(-1.5, 1.5)
            y = rng.uniform(-3.1, 3.1)
            g = pitch_yaw_to_vector(p, y)
            assert abs(np.linalg.norm(g.vector) - 1.0) < 1e-12

    def test_pole_raises(self):
        with pytest.raises(DegeneratePoleError):
            vector_to_pitch_yaw([0.0, 1.0, 0.0])
        with pytest.raises(DegeneratePoleError):
            vector_to_pitch_yaw([0.0, -1.0, 0.0])

    def test_out_of_range_angles_raise(self):
        with pytest.raises(InvalidDirectionError):
            pitch_yaw_to_vector(2.0, 0.0)
        with pytest.raises(InvalidDirectionError):
            pitch_yaw_to_vector(0.0, 4.0)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(11)
        p = rng.uniform(-1.4, 1.4, size=20)
        y = rng.uniform(-3.0, 3.0, size=20)
        batch = pitch_yaw_arrays_to_vectors(p, y)
        for i in range(20):
            np.testing.assert_allclose(
                batch[i], pitch_yaw_to_vector(p[i], y[i]).vector, atol=1e-15
            )


class TestGazeDirection:
    def test_rejects_zero_vector(self):
        with pytest.raises(InvalidDirectionError):
            GazeDirection(np.zeros(3))

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidDirectionError):
            GazeDirection([np.nan, 0.0, -1.0])

    def test_rejects_far_from_unit(self):
        with pytest.raises(InvalidDirectionError):
            GazeDirection([0.0, 0.0, -2.0])

    def test_repairs_tiny_norm_defect(self):
        g = GazeDirection([0.0, 0.0, -(1.0 + 5e-8)])
        assert abs(np.linalg.norm(g.vector) - 1.0) < 1e-12

    def test_vector_is_immutable(self):
        g = pitch_yaw_to_vector(0.1, 0.2)
        with pytest.raises(ValueError):
            g.vector[0] = 5.0


class TestRotationMatrix:
    def test_accepts_exact_rotation(self):
        r = axis_angle_rotation([0, 1, 0], 0.5)
        np.testing.assert_allclose(r.m @ r.m.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r.m) - 1.0) < 1e-12

    def test_rejects_reflection(self):
        with pytest.raises(InvariantViolationError):
            RotationMatrix(np.diag([1.0, 1.0, -1.0]))

    def test_rejects_garbage(self):
        with pytest.raises(InvariantViolationError):
            RotationMatrix(np.ones((3, 3)))

    def test_repairs_small_defect(self):
        r0 = axis_angle_rotation([1, 2, 3], 0.7).m
        noisy = r0 + 1e-8 * np.ones((3, 3))
        r = RotationMatrix(noisy)
        np.testing.assert_allclose(r.m.T @ r.m, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(r.m, r0, atol=1e-7)

    def test_inverse_is_transpose(self):
        r = axis_angle_rotation([1, 0, 1], 1.1, from_frame="cam0", to_frame="screen")
        inv = r.inverse
        np.testing.assert_allclose(inv.m, r.m.T)
        assert inv.from_frame == "screen"
        assert inv.to_frame == "cam0"

    def test_matrix_is_immutable(self):
        r = axis_angle_rotation([0, 0, 1], 0.2)
        with pytest.raises(ValueError):
            r.m[0, 0] = 9.0


class TestAngularError:
    def test_identical_is_zero(self):
        g = pitch_yaw_to_vector(0.2, -0.4)
        assert angular_error_deg(g, g) == 0.0

    def test_orthogonal_is_ninety(self):
        assert abs(angular_error_deg([1, 0, 0], [0, 1, 0]) - 90.0) < 1e-12

    def test_opposite_is_one_eighty(self):
        assert abs(angular_error_deg([0, 0, -1], [0, 0, 1]) - 180.0) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            u = rng.normal(size=3)
            v = rng.normal(size=3)
            assert angular_error_deg(u, v) == pytest.approx(
                angular_error_deg(v, u), abs=1e-12
            )

    def test_rotation_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            u = rng.normal(size=3)
            v = rng.normal(size=3)
            r = random_rotation(rng)
            assert angular_error_deg(r.apply(u), r.apply(v)) == pytest.approx(
                angular_error_deg(u, v), abs=1e-9
            )

    def test_known_angle(self):
        # 30 degrees about y between two unit directions in the xz plane.
        u = [0.0, 0.0, -1.0]
        v = [-np.sin(np.pi / 6), 0.0, -np.cos(np.pi / 6)]
        assert angular_error_deg(u, v) == pytest.approx(30.0, abs=1e-10)

    def test_precision_near_zero(self):
        # A 1e-7 rad separation must survive the degree conversion; the plain
        # arccos form loses it to rounding.
        eps = 1e-7
        u = [0.0, 0.0, -1.0]
        v = [np.sin(eps), 0.0, -np.cos(eps)]
        expected = np.degrees(eps)
        assert angular_error_deg(u, v) == pytest.approx(expected, rel=1e-6)

    def test_zero_vector_raises(self):
        with pytest.raises(InvalidDirectionError):
            angular_error_deg([0, 0, 0], [0, 0, -1])

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(9)
        u = rng.normal(size=(25, 3))
        v = rng.normal(size=(25, 3))
        batch = angular_error_deg_arrays(u, v)
        for i in range(25):
            assert batch[i] == pytest.approx(angular_error_deg(u[i], v[i]), abs=1e-10)


class TestEffectiveRotation:
    def test_matches_explicit_product(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            rot = random_rotation(rng)
            norm = random_rotation(rng)
            eff = effective_rotation(rot, norm)
            np.testing.assert_allclose(eff.m, rot.m @ norm.m.T, atol=1e-12)

    def test_identity_normalization_is_noop(self):
        rot = axis_angle_rotation([0, 1, 0], 0.4)
        eff = effective_rotation(rot, np.eye(3))
        np.testing.assert_allclose(eff.m, rot.m, atol=1e-15)

    def test_undoes_normalization(self):
        # A normalized-frame direction mapped through the effective rotation
        # equals the original-camera direction mapped straight to screen.
        rng = np.random.default_rng(17)
        rot = random_rotation(rng)
        norm = random_rotation(rng)
        g_cam = pitch_yaw_to_vector(0.2, 0.1).vector
        g_norm = norm.apply(g_cam)
        eff = effective_rotation(rot, norm)
        np.testing.assert_allclose(eff.apply(g_norm), rot.apply(g_cam), atol=1e-12)

    def test_frame_chain_mismatch_raises(self):
        rot = axis_angle_rotation([0, 1, 0], 0.4, from_frame="cam0", to_frame="screen")
        norm = axis_angle_rotation([1, 0, 0], 0.1, from_frame="cam1", to_frame="norm")
        with pytest.raises(InvariantViolationError):
            effective_rotation(rot, norm)

    def test_frame_tags_propagate(self):
        rot = axis_angle_rotation([0, 1, 0], 0.4, from_frame="cam0", to_frame="screen")
        norm = axis_angle_rotation([1, 0, 0], 0.1, from_frame="cam0", to_frame="norm")
        eff = effective_rotation(rot, norm)
        assert eff.from_frame == "norm"
        assert eff.to_frame == "screen"


class TestMultiviewConsistency:
    def test_consistent_views_report_zero(self):
        # One common-frame direction observed through several camera frames:
        # per-view label is R^T g_common, mapping back must agree exactly.
        rng = np.random.default_rng(21)
        g_common = pitch_yaw_to_vector(0.15, -0.3).vector
        views = []
        for _ in range(4):
            r = random_rotation(rng)
            views.append((r, r.m.T @ g_common))
        assert check_multiview_consistency(views) < 1e-9

    def test_perturbed_view_reports_discrepancy(self):
        rng = np.random.default_rng(23)
        g_common = pitch_yaw_to_vector(0.0, 0.0).vector
        r1 = random_rotation(rng)
        r2 = random_rotation(rng)
        tilt = axis_angle_rotation([1, 0, 0], np.radians(5.0))
        views = [
            (r1, r1.m.T @ g_common),
            (r2, r2.m.T @ tilt.apply(g_common)),
        ]
        assert check_multiview_consistency(views) == pytest.approx(5.0, abs=1e-9)

    def test_single_view_raises(self):
        r = axis_angle_rotation([0, 1, 0], 0.4)
        with pytest.raises(InsufficientViewsError):
            check_multiview_consistency([(r, [0.0, 0.0, -1.0])])
