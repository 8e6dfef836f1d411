"""Poses, rigid transforms, unit-cube fitting, pose Jacobians and the scene file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relmetric.errors import DegenerateSceneError, FormatError, InvalidPoseError
from relmetric.geometry import (PointCloud, Pose, Scene, fit_unit_cube, format_scene, parse_scene,
                                pose_gradients, pose_jacobians, quat_multiply, read_scene,
                                rotation_matrix, transform_cloud, write_scene)

from conftest import random_pose, random_scene

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)
clouds = arrays(np.float64, st.tuples(st.integers(4, 30), st.just(3)), elements=finite)


def _fd_rotated(p, q, h=1e-6):
    """Central differences of R(q) p w.r.t. each raw quaternion component."""
    out = np.zeros((3, 4))
    for k in range(4):
        dq = np.zeros(4)
        dq[k] = h
        out[:, k] = (rotation_matrix(q + dq) @ p - rotation_matrix(q - dq) @ p) / (2 * h)
    return out


class TestPointCloud:
    def test_rejects_too_few_points(self):
        with pytest.raises(FormatError):
            PointCloud(np.zeros((3, 3)))

    def test_rejects_non_finite(self):
        pts = np.zeros((5, 3))
        pts[2, 1] = np.nan
        with pytest.raises(FormatError):
            PointCloud(pts)

    def test_points_are_read_only(self):
        c = PointCloud(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            c.points[0, 0] = 1.0


class TestPose:
    def test_renormalizes(self):
        p = Pose([0, 0, 0], [2.0, 0, 0, 0])
        np.testing.assert_array_equal(p.q, [1.0, 0, 0, 0])

    def test_unit_quaternion_kept_bit_exact(self):
        q = np.array([0.5, 0.5, 0.5, 0.5])
        assert Pose([0, 0, 0], q).q.tobytes() == q.tobytes()

    def test_zero_quaternion_rejected(self):
        with pytest.raises(InvalidPoseError):
            Pose([0, 0, 0], [0, 0, 0, 0])

    def test_inverse_compose_is_identity(self, rng):
        for _ in range(20):
            p = random_pose(rng)
            ident = p.compose(p.inverse())
            np.testing.assert_allclose(ident.t, 0.0, atol=1e-12)
            np.testing.assert_allclose(np.abs(ident.q[0]), 1.0, atol=1e-12)

    @given(quats)
    def test_norm_within_tolerance(self, q):
        assert abs(np.linalg.norm(Pose([0, 0, 0], q).q) - 1.0) < 1e-6


class TestScene:
    def test_ids_must_differ(self):
        c = PointCloud(np.zeros((4, 3)))
        with pytest.raises(FormatError):
            Scene("s", "a", "a", c, c, Pose(), Pose())

    def test_ids_are_tokens(self):
        c = PointCloud(np.zeros((4, 3)))
        with pytest.raises(FormatError):
            Scene("my scene", "a", "b", c, c, Pose(), Pose())


class TestRotation:
    @given(quats)
    def test_orthonormal(self, q):
        r = rotation_matrix(q / np.linalg.norm(q))
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)

    @given(quats, quats)
    def test_quaternion_product_composes_rotations(self, a, b):
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
        np.testing.assert_allclose(rotation_matrix(quat_multiply(a, b)),
                                   rotation_matrix(a) @ rotation_matrix(b), atol=1e-12)


class TestTransformCloud:
    def test_identity_pose(self):
        out = transform_cloud(np.array([[0.2, 0.3, 0.4]] * 4), Pose())
        np.testing.assert_array_equal(out[0], [0.2, 0.3, 0.4])

    def test_pure_translation(self):
        out = transform_cloud(np.zeros((4, 3)), Pose([1, 2, 3], [1, 0, 0, 0]))
        np.testing.assert_array_equal(out[0], [1, 2, 3])

    def test_quarter_turn_about_z(self):
        s = np.sqrt(2) / 2
        out = transform_cloud(np.array([[1.0, 0, 0]] * 4), Pose([0, 0, 0], [s, 0, 0, s]))
        np.testing.assert_allclose(out[0], [0, 1, 0], atol=1e-12)

    def test_input_unmodified(self, rng):
        c = PointCloud(rng.normal(size=(10, 3)))
        before = c.points.copy()
        transform_cloud(c, random_pose(rng))
        np.testing.assert_array_equal(c.points, before)

    @settings(max_examples=50)
    @given(clouds, quats, arrays(np.float64, 3, elements=finite))
    def test_rigid(self, pts, q, t):
        out = transform_cloud(pts, Pose(t, q))
        d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)

    @settings(max_examples=50)
    @given(clouds, quats, arrays(np.float64, 3, elements=finite))
    def test_inverse_round_trip(self, pts, q, t):
        pose = Pose(t, q)
        back = transform_cloud(transform_cloud(pts, pose), pose.inverse())
        np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_non_finite_result(self):
        with pytest.raises(InvalidPoseError):
            transform_cloud(np.full((4, 3), 1e308), Pose([1e308, 0, 0], [1, 0, 0, 0]))


class TestFitUnitCube:
    def _corners(self, hi):
        return np.array([[0, 0, 0], hi, [0, 0, 0], hi], dtype=float)

    def test_already_unit(self):
        f = fit_unit_cube(self._corners([1, 1, 1]), self._corners([1, 1, 1]))
        assert f.scale == 1.0
        np.testing.assert_array_equal(f.offset, [0, 0, 0])

    def test_uniform_shrink(self):
        f = fit_unit_cube(self._corners([2, 2, 2]), self._corners([2, 2, 2]))
        assert f.scale == 0.5
        np.testing.assert_array_equal(f.offset, [0, 0, 0])

    def test_centers_short_axes(self):
        pts = self._corners([2, 1, 1])
        f = fit_unit_cube(pts, pts)
        assert f.scale == 0.5
        np.testing.assert_array_equal(f.offset, [0, -0.5, -0.5])
        u = f.apply(pts)
        assert u.min() >= 0 and u.max() <= 1
        np.testing.assert_allclose(u[:, 1:].min(axis=0) + u[:, 1:].max(axis=0), 1.0)

    def test_degenerate(self):
        p = np.ones((4, 3))
        with pytest.raises(DegenerateSceneError):
            fit_unit_cube(p, p)

    @settings(max_examples=100)
    @given(clouds, clouds)
    def test_maps_into_cube(self, a, b):
        pts = np.vstack([a, b])
        if np.ptp(pts, axis=0).max() == 0:
            return
        f = fit_unit_cube(a, b)
        u = f.apply(pts)
        assert u.min() >= -1e-9 and u.max() <= 1 + 1e-9
        axis = int(np.argmax(np.ptp(pts, axis=0)))
        assert u[:, axis].min() == pytest.approx(0.0, abs=1e-12)
        assert u[:, axis].max() == pytest.approx(1.0, abs=1e-9)


class TestPoseJacobians:
    def test_translation_block_identity(self, rng):
        d_dt, _ = pose_jacobians(rng.normal(size=(6, 3)), random_pose(rng))
        np.testing.assert_array_equal(d_dt, np.broadcast_to(np.eye(3), (6, 3, 3)))

    def test_identity_quaternion_unit_x(self):
        p = np.array([[1.0, 0, 0]] * 4)
        q = np.array([1.0, 0, 0, 0])
        _, d_dq = pose_jacobians(p, Pose([0, 0, 0], q))
        np.testing.assert_allclose(d_dq[0], _fd_rotated(p[0], q), atol=1e-5)

    def test_origin_has_zero_rotation_block(self, rng):
        _, d_dq = pose_jacobians(np.zeros((4, 3)), random_pose(rng))
        np.testing.assert_array_equal(d_dq, 0.0)

    def test_matches_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            pose = random_pose(rng)
            p = rng.normal(size=(4, 3))
            _, d_dq = pose_jacobians(p, pose)
            fd = _fd_rotated(p[0], pose.q)
            worst = max(worst, np.linalg.norm(d_dq[0] - fd) / np.linalg.norm(fd))
        assert worst < 1e-5

    def test_pose_gradients_chain(self, rng):
        """pose_gradients equals the explicit Jacobian contraction."""
        pts = rng.normal(size=(15, 3))
        pose = random_pose(rng)
        g = rng.normal(size=(15, 3))
        d_dt, d_dq = pose_jacobians(pts, pose)
        gt, gq = pose_gradients(pts, pose, g)
        np.testing.assert_allclose(gt, np.einsum("ni,nij->j", g, d_dt), atol=1e-12)
        np.testing.assert_allclose(gq, np.einsum("ni,nik->k", g, d_dq), atol=1e-12)


class TestSceneFormat:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        for i in range(10):
            s = random_scene(rng, scene_id=f"s{i}")
            path = tmp_path / "x.scene"
            write_scene(path, s)
            back = read_scene(path)
            assert back == s
            assert format_scene(back) == format_scene(s)

    def test_layout(self, rng):
        lines = format_scene(random_scene(rng, 4, 5)).splitlines()
        assert lines[0] == "scene r0 objA objB"
        assert lines[1].startswith("pose ") and len(lines[1].split()) == 8
        assert lines[3] == "points 4"
        assert lines[8] == "points 5"
        assert len(lines) == 3 + 1 + 4 + 1 + 5

    @pytest.mark.parametrize("text", [
        "",
        "scene a b\n",
        "scene s a b\npose 0 0 0 1 0 0 0\n",
        "scene s a b\npose 0 0 0 1 0 0 0\npose 0 0 0 1 0 0 0\npoints 5\n0 0 0\n",
        "scene s a b\npose 0 0 0 1 0 0\npose 0 0 0 1 0 0 0\npoints 4\n",
    ])
    def test_malformed(self, text):
        with pytest.raises(FormatError):
            parse_scene(text)
