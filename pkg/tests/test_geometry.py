import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fourdkit.errors import DimensionError, InvalidIntrinsicsError, InvariantViolation
from fourdkit.geometry import (
    Intrinsics,
    Pointmap,
    Pose,
    RayDepthMap,
    RayMap,
    SceneFlowField,
    SceneSequence,
    ViewBundle,
    apply_motion,
    canonical_quat,
    compose_pointmap,
    decompose_pointmap,
    inverse_pose,
    matrix_to_quat,
    pixel_grid,
    project,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_matrix,
    ray_depth_to_z,
    rays_from_intrinsics,
    recover_metric_flow,
    rotvec_delta,
    unproject,
    z_to_ray_depth,
)

from conftest import random_intrinsics, random_pose

quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


class TestQuaternion:
    def test_axis_angle_about_z_matches_closed_form(self):
        for a in (0.0, 0.3, 1.2, math.pi / 2, 3.0):
            R = quat_to_matrix(quat_from_axis_angle([0, 0, 1], a))
            np.testing.assert_allclose(R, _rot_z(a), atol=1e-15)

    @given(quats)
    def test_matrix_round_trip(self, q):
        q = q / np.linalg.norm(q)
        R = quat_to_matrix(q)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        back = matrix_to_quat(R)
        assert back[0] >= 0
        # the sign is only pinned down away from w == 0, so compare up to sign
        assert min(np.linalg.norm(back - q), np.linalg.norm(back + q)) < 1e-12

    @given(quats, quats)
    def test_product_matches_matrix_product(self, a, b):
        a = a / np.linalg.norm(a)
        b = b / np.linalg.norm(b)
        np.testing.assert_allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)

    def test_non_unit_rejected(self):
        with pytest.raises(InvariantViolation):
            quat_to_matrix([1.0, 0.1, 0, 0])

    def test_canonical_sign(self):
        q = np.array([-0.5, 0.5, 0.5, 0.5])
        np.testing.assert_array_equal(canonical_quat(q), -q)
        np.testing.assert_array_equal(canonical_quat([0.0, -1.0, 0.0, 0.0]), [0.0, 1.0, 0.0, 0.0])

    def test_matrix_to_quat_near_pi(self):
        # 180 degree turn: trace is -1, the w-branch would be ill conditioned
        R = np.diag([1.0, -1.0, -1.0])
        q = matrix_to_quat(R)
        np.testing.assert_allclose(quat_to_matrix(q), R, atol=1e-15)

    def test_rotvec_delta_zero_is_exact(self):
        assert np.count_nonzero(rotvec_delta([0.0, 0.0, 0.0])) == 0

    def test_rotvec_delta_against_axis_angle(self, rng):
        for _ in range(20):
            w = rng.normal(size=3)
            th = np.linalg.norm(w)
            R = quat_to_matrix(quat_from_axis_angle(w, th))
            np.testing.assert_allclose(rotvec_delta(w) + np.eye(3), R, atol=1e-14)


class TestPose:
    def test_sign_canonical_equal(self, rng):
        p = random_pose(rng)
        np.testing.assert_array_equal(Pose(-p.q, p.t).q, p.q)

    def test_inverse_composes_to_identity(self, rng):
        for _ in range(50):
            p = random_pose(rng)
            e = p @ inverse_pose(p)
            np.testing.assert_allclose(e.as_matrix(), np.eye(4), atol=1e-12)

    def test_compose_matches_homogeneous_product(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose((a @ b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)

    def test_apply_matches_homogeneous(self, rng):
        p = random_pose(rng)
        x = rng.normal(size=(5, 3))
        hom = np.c_[x, np.ones(5)] @ p.as_matrix().T
        np.testing.assert_allclose(p.apply(x), hom[:, :3], atol=1e-12)

    def test_list_round_trip(self, rng):
        p = random_pose(rng)
        q = Pose.from_list(p.to_list())
        np.testing.assert_array_equal(q.q, p.q)
        np.testing.assert_array_equal(q.t, p.t)

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(InvariantViolation):
            Pose(np.array([2.0, 0, 0, 0]), np.zeros(3))


class TestIntrinsics:
    @pytest.mark.parametrize(
        "args",
        [(0, 1, 2, 2, 4, 4), (1, -1, 2, 2, 4, 4), (1, 1, 2, 2, 0, 4), (1, 1, 5, 2, 4, 4), (1, 1, 2, -0.1, 4, 4)],
    )
    def test_invalid(self, args):
        with pytest.raises(InvalidIntrinsicsError):
            Intrinsics(*args)

    def test_dict_round_trip(self):
        K = Intrinsics(50.0, 52.0, 31.5, 23.5, 64, 48)
        assert Intrinsics.from_dict(K.to_dict()) == K


class TestProjection:
    def test_principal_ray_is_optical_axis(self):
        K = Intrinsics(10.0, 10.0, 4.0, 3.0, 8, 6)
        # pixel centre (u + 0.5, v + 0.5) sits on the principal point
        d = unproject(K, np.array([3.5, 2.5]), 1.0)
        np.testing.assert_allclose(d, [0, 0, 1], atol=1e-15)

    def test_rays_unit_and_forward(self, rng):
        K = random_intrinsics(rng, 5, 7)
        R = rays_from_intrinsics(K)
        np.testing.assert_allclose(np.linalg.norm(R.dirs, axis=-1), 1.0, atol=1e-15)
        assert (R.dirs[..., 2] > 0).all()

    def test_project_inverts_unproject(self, rng):
        K = random_intrinsics(rng, 6, 9)
        uv = pixel_grid(6, 9) + rng.uniform(-0.5, 0.5, size=(6, 9, 2))
        d = rng.uniform(0.5, 20, size=(6, 9))
        back, front = project(K, unproject(K, uv, d))
        assert front.all()
        np.testing.assert_allclose(back, uv, atol=1e-11)

    def test_project_pinhole_oracle(self):
        K = Intrinsics(100.0, 80.0, 32.0, 24.0, 64, 48)
        P = np.array([[0.2, -0.1, 2.0], [0.0, 0.0, -1.0]])
        uv, front = project(K, P)
        # index space: pixel centres sit at integer coordinates
        np.testing.assert_allclose(uv[0], [100 * 0.1 + 32 - 0.5, 80 * -0.05 + 24 - 0.5])
        assert front.tolist() == [True, False]
        assert np.isnan(uv[1]).all()

    def test_z_ray_depth_round_trip(self, rng):
        K = random_intrinsics(rng)
        R = rays_from_intrinsics(K)
        D = RayDepthMap(rng.uniform(1, 5, size=K.shape), np.ones(K.shape, bool))
        z = ray_depth_to_z(R, D)
        np.testing.assert_allclose(z_to_ray_depth(R, z, D.valid).d, D.d, rtol=1e-14)


def _compose_loop(s, T, R, D):
    H, W = D.d.shape
    out = np.full((H, W, 3), np.nan)
    Rm = T.R
    for i in range(H):
        for j in range(W):
            if D.valid[i, j]:
                out[i, j] = s * (Rm @ (R.dirs[i, j] * D.d[i, j]) + T.t)
    return out


class TestComposition:
    def test_matches_per_pixel_oracle(self, rng):
        K = random_intrinsics(rng)
        R = rays_from_intrinsics(K)
        valid = rng.random(K.shape) < 0.8
        D = RayDepthMap(np.where(valid, rng.uniform(0.5, 10, K.shape), np.nan), valid)
        T = random_pose(rng)
        G = compose_pointmap(3.7, T, R, D)
        np.testing.assert_allclose(G.pts, _compose_loop(3.7, T, R, D), rtol=1e-13, atol=1e-12)
        np.testing.assert_array_equal(G.valid, valid)
        assert np.isnan(G.pts[~valid]).all()

    def test_round_trip(self, rng):
        K = random_intrinsics(rng)
        R = rays_from_intrinsics(K)
        D = RayDepthMap(rng.uniform(0.5, 50, K.shape), np.ones(K.shape, bool))
        T = random_pose(rng)
        s = 2.5
        G = compose_pointmap(s, T, R, D)
        R2, D2 = decompose_pointmap(Pointmap(G.pts / s, G.valid), T)
        np.testing.assert_allclose(R2.dirs, R.dirs, atol=1e-12)
        np.testing.assert_allclose(D2.d, D.d, rtol=1e-12)
        G2 = compose_pointmap(s, T, R2, D2)
        np.testing.assert_allclose(G2.pts, G.pts, atol=1e-10)

    def test_decompose_marks_origin_and_behind_invalid(self):
        pts = np.array([[[0.0, 0.0, 0.0], [0.0, 0.0, -2.0], [1.0, 0.0, 1.0]]])
        R, D = decompose_pointmap(Pointmap(pts, np.ones((1, 3), bool)), Pose.identity())
        assert D.valid.tolist() == [[False, False, True]]
        assert np.isnan(R.dirs[0, :2]).all()

    @pytest.mark.parametrize("s", [0.0, -1.0, float("nan")])
    def test_scale_must_be_positive(self, s):
        R = RayMap(np.tile([0, 0, 1.0], (2, 2, 1)))
        D = RayDepthMap(np.ones((2, 2)), np.ones((2, 2), bool))
        with pytest.raises(InvariantViolation):
            compose_pointmap(s, Pose.identity(), R, D)

    def test_shape_mismatch(self):
        R = RayMap(np.tile([0, 0, 1.0], (2, 2, 1)))
        D = RayDepthMap(np.ones((2, 3)), np.ones((2, 3), bool))
        with pytest.raises(DimensionError):
            compose_pointmap(1.0, Pose.identity(), R, D)

    @given(st.floats(0.01, 100))
    def test_scale_is_linear(self, s):
        R = RayMap(np.tile([0.6, 0, 0.8], (2, 2, 1)))
        D = RayDepthMap(np.full((2, 2), 3.0), np.ones((2, 2), bool))
        T = Pose(np.array([0.8, 0.6, 0, 0]), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(compose_pointmap(s, T, R, D).pts, s * compose_pointmap(1.0, T, R, D).pts, rtol=1e-13)


class TestFlow:
    def test_static_flow_keeps_points(self, rng):
        G = Pointmap(rng.normal(size=(3, 4, 3)), np.ones((3, 4), bool))
        out = apply_motion(G, SceneFlowField.zeros((3, 4)))
        np.testing.assert_array_equal(out.pts, G.pts)

    def test_validity_is_joint(self, rng):
        v1 = rng.random((3, 4)) < 0.5
        v2 = rng.random((3, 4)) < 0.5
        out = apply_motion(Pointmap(rng.normal(size=(3, 4, 3)), v1), SceneFlowField(rng.normal(size=(3, 4, 3)), v2))
        np.testing.assert_array_equal(out.valid, v1 & v2)
        assert np.isnan(out.pts[~(v1 & v2)]).all()

    def test_recover_metric_flow(self, rng):
        F = SceneFlowField(rng.normal(size=(2, 2, 3)), np.ones((2, 2), bool))
        np.testing.assert_array_equal(recover_metric_flow(4.0, F).flow, 4.0 * F.flow)
        with pytest.raises(InvariantViolation):
            recover_metric_flow(0.0, F)


class TestContainers:
    def _view(self, h, w):
        K = Intrinsics(10.0, 10.0, w / 2, h / 2, w, h)
        return ViewBundle(K, Pose.identity(), rays_from_intrinsics(K), RayDepthMap(np.ones((h, w)), np.ones((h, w), bool)))

    def test_sequence_rejects_mixed_shapes(self):
        with pytest.raises(DimensionError):
            SceneSequence([self._view(4, 4), self._view(4, 5)])

    def test_view_rejects_bad_flow_shape(self):
        v = self._view(4, 4)
        with pytest.raises(DimensionError):
            ViewBundle(v.intrinsics, v.pose, v.rays, v.ray_depth, scene_flow=SceneFlowField.zeros((3, 4)))

    def test_sequence_scale_positive(self):
        with pytest.raises(InvariantViolation):
            SceneSequence([self._view(4, 4)], scale=0.0)
