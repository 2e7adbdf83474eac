import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_close, random_pose
from mcrecon.errors import NonPositiveDisparity
from mcrecon.geometry import (
    Intrinsics,
    PoseSE3,
    Sim3,
    hat,
    pixel_grid,
    relative_pose,
    reproject,
    reproject_jacobians,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
    se3_right_jacobian,
    unproject,
)


def taylor_expm(A, terms=30):
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def twist_matrix(delta):
    M = np.zeros((4, 4))
    M[:3, :3] = hat(delta[:3])
    M[:3, 3] = delta[3:]
    return M


class TestExp:
    def test_zero_is_identity(self):
        T = se3_exp(np.zeros(6))
        assert np.array_equal(T.rotation, np.eye(3))
        assert np.array_equal(T.translation, np.zeros(3))

    def test_quarter_turn_about_z(self):
        T = se3_exp([0, 0, math.pi / 2, 0, 0, 0])
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(T.rotation, expected, atol=1e-15)
        np.testing.assert_allclose(T.translation, 0.0, atol=1e-15)

    def test_matches_series_oracle(self):
        delta = np.array([0.1, -0.2, 0.3, 1.0, 2.0, 3.0])
        np.testing.assert_allclose(se3_exp(delta).matrix, taylor_expm(twist_matrix(delta)), atol=1e-13)

    def test_small_angle_branch_continuous(self):
        delta = np.array([3e-9, -1e-9, 2e-9, 0.5, 0.1, -0.2])
        np.testing.assert_allclose(se3_exp(delta).matrix, taylor_expm(twist_matrix(delta)), atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3),
        st.floats(0.0, math.pi - 0.1),
        st.lists(st.floats(-5.0, 5.0), min_size=3, max_size=3),
    )
    def test_log_round_trip(self, axis, angle, trans):
        axis = np.array(axis)
        n = np.linalg.norm(axis)
        omega = axis / n * angle if n > 1e-6 else np.zeros(3)
        delta = np.concatenate([omega, trans])
        np.testing.assert_allclose(se3_log(se3_exp(delta)), delta, atol=1e-9)

    def test_right_jacobian_finite_difference(self, rng):
        for _ in range(20):
            delta = rng.normal(scale=0.6, size=6)
            base = se3_exp(delta)
            J = se3_right_jacobian(delta)
            h = 1e-6
            num = np.zeros((6, 6))
            for k in range(6):
                e = np.zeros(6)
                e[k] = h
                plus = se3_log(se3_inverse(base) @ se3_exp(delta + e))
                minus = se3_log(se3_inverse(base) @ se3_exp(delta - e))
                num[:, k] = (plus - minus) / (2 * h)
            assert fd_close(J, num)


class TestCompose:
    def test_identity_element(self, rng):
        P = random_pose(rng)
        Q = se3_compose(PoseSE3.identity(), P)
        np.testing.assert_array_equal(Q.matrix, P.matrix)

    def test_double_inverse(self, rng):
        P = random_pose(rng)
        np.testing.assert_allclose(se3_inverse(se3_inverse(P)).matrix, P.matrix, atol=1e-15)

    def test_matches_matrix_product(self, rng):
        for _ in range(10):
            A, B = random_pose(rng), random_pose(rng)
            np.testing.assert_allclose((A @ B).matrix, A.matrix @ B.matrix, atol=1e-14)

    def test_compose_with_inverse(self, rng):
        P = random_pose(rng)
        np.testing.assert_allclose((P @ P.inverse()).matrix, np.eye(4), atol=1e-12)

    def test_sim3_unit_scale_equals_pose(self, rng):
        P = random_pose(rng)
        S = Sim3(1.0, P.rotation, P.translation)
        pts = rng.normal(size=(20, 3))
        np.testing.assert_allclose(S.apply(pts), P.apply(pts), atol=1e-12)


class TestUnproject:
    def test_principal_ray_unit(self):
        K = Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
        p = unproject(np.array([[0.0, 0.0]]), np.array([1.0]), K)
        np.testing.assert_array_equal(p, [[0.0, 0.0, 1.0]])

    def test_principal_ray_half_disparity(self):
        K = Intrinsics(100.0, 100.0, 50.0, 40.0, 100, 80)
        p = unproject(np.array([[50.0, 40.0]]), np.array([0.5]), K)
        np.testing.assert_allclose(p, [[0.0, 0.0, 2.0]])

    def test_off_axis_matches_inverse_matrix(self, K64):
        u = np.array([[3.0, 41.0], [60.0, 2.0]])
        d = np.array([0.4, 1.7])
        Kinv = np.linalg.inv(K64.matrix)
        expected = (Kinv @ np.c_[u, np.ones(2)].T).T / d[:, None]
        np.testing.assert_allclose(unproject(u, d, K64), expected, atol=1e-14)

    def test_non_positive_disparity_raises(self, K64):
        with pytest.raises(NonPositiveDisparity):
            unproject(np.zeros((2, 2)), np.array([1.0, 0.0]), K64)

    def test_masked_pixels_may_be_non_positive(self, K64):
        unproject(np.zeros((2, 2)), np.array([1.0, 0.0]), K64, mask=np.array([True, False]))


class TestReproject:
    def test_identity_transform(self, K64, rng):
        u = pixel_grid(48, 64)
        d = rng.uniform(0.2, 2.0, size=(48, 64))
        r = reproject(u, d, K64, K64, PoseSE3.identity())
        np.testing.assert_allclose(r.pixels, u, atol=1e-12)
        np.testing.assert_allclose(r.depth, 1.0 / d, rtol=1e-15)
        assert r.valid.all()

    def test_halving_depth_doubles_offsets(self, K64):
        # camera j sits halfway along the optical axis toward a fronto-parallel plane at depth 4
        u = np.array([[40.0, 30.0], [10.0, 5.0]])
        d = np.full(2, 0.25)
        T_ij = PoseSE3(np.eye(3), [0.0, 0.0, -2.0])
        r = reproject(u, d, K64, K64, T_ij)
        c = np.array([K64.cx, K64.cy])
        np.testing.assert_allclose(r.pixels - c, 2.0 * (u - c), atol=1e-12)
        np.testing.assert_allclose(r.depth, 2.0)

    def test_point_behind_camera_invalid(self, K64):
        T_ij = PoseSE3(np.eye(3), [0.0, 0.0, -5.0])
        r = reproject(np.array([[31.5, 23.5]]), np.array([0.5]), K64, K64, T_ij)
        assert not r.valid[0]

    def test_round_trip_inverse_consistent(self, K64, rng):
        u = pixel_grid(48, 64)
        d = rng.uniform(0.3, 0.6, size=(48, 64))
        T_ij = se3_exp([0.02, -0.03, 0.01, 0.05, -0.02, 0.03])
        fwd = reproject(u, d, K64, K64, T_ij)
        back = reproject(fwd.pixels, 1.0 / np.where(fwd.valid, fwd.depth, 1.0), K64, K64, T_ij.inverse(), mask=fwd.valid)
        np.testing.assert_allclose(back.pixels[fwd.valid], u[fwd.valid], atol=1e-9)

    def test_relative_pose_convention(self, rng):
        Ti, Tj = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(relative_pose(Ti, Tj).matrix, np.linalg.inv(Tj.matrix) @ Ti.matrix, atol=1e-12)


def finite_difference_jacobians(u, d, Ki, Kj, Ti, Tj, h=1e-6):
    def pix(Ti_, Tj_, d_):
        return reproject(u, d_, Ki, Kj, relative_pose(Ti_, Tj_)).pixels

    Ji = np.zeros(u.shape[:-1] + (2, 6))
    Jj = np.zeros_like(Ji)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        Ji[..., k] = (pix(Ti @ se3_exp(e), Tj, d) - pix(Ti @ se3_exp(-e), Tj, d)) / (2 * h)
        Jj[..., k] = (pix(Ti, Tj @ se3_exp(e), d) - pix(Ti, Tj @ se3_exp(-e), d)) / (2 * h)
    Jd = (pix(Ti, Tj, d + h) - pix(Ti, Tj, d - h)) / (2 * h)
    return Ji, Jj, Jd


def random_reprojection_instance(rng):
    Ki = Intrinsics(*rng.uniform(40, 80, 2), *rng.uniform(20, 40, 2), 64, 48)
    Kj = Intrinsics(*rng.uniform(40, 80, 2), *rng.uniform(20, 40, 2), 64, 48)
    Ti = random_pose(rng, 0.3, 0.5)
    Tj = Ti @ se3_exp(np.concatenate([rng.normal(scale=0.05, size=3), rng.normal(scale=0.1, size=3)]))
    u = rng.uniform([0, 0], [64, 48], size=(16, 2))
    d = rng.uniform(0.3, 1.0, size=16)
    return u, d, Ki, Kj, Ti, Tj


class TestJacobians:
    def test_against_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            u, d, Ki, Kj, Ti, Tj = random_reprojection_instance(rng)
            r = reproject_jacobians(u, d, Ki, Kj, relative_pose(Ti, Tj))
            Ji, Jj, Jd = finite_difference_jacobians(u, d, Ki, Kj, Ti, Tj)
            ok = r.depth > 0.05
            assert fd_close(r.d_pose_i[ok], Ji[ok])
            assert fd_close(r.d_pose_j[ok], Jj[ok])
            assert fd_close(r.d_disp[ok], Jd[ok])

    def test_pure_rotation_is_depth_independent(self, K64):
        T_ij = se3_exp([0.0, 0.1, 0.0, 0.0, 0.0, 0.0])
        r = reproject_jacobians(np.array([[K64.cx, K64.cy]]), np.array([0.7]), K64, K64, T_ij)
        np.testing.assert_allclose(r.d_disp, 0.0, atol=1e-12)

    def test_disparity_sign_follows_translation(self, K64):
        # j moved toward the scene: off-axis pixels move outward, more so for nearer points (larger d)
        T_ij = PoseSE3(np.eye(3), [0.0, 0.0, -0.5])
        u = np.array([[50.0, 23.5]])
        r = reproject_jacobians(u, np.array([0.5]), K64, K64, T_ij)
        h = 1e-6
        fd = (reproject(u, np.array([0.5 + h]), K64, K64, T_ij).pixels - reproject(u, np.array([0.5 - h]), K64, K64, T_ij).pixels) / (2 * h)
        assert r.d_disp[0, 0] > 0 and fd[0, 0] > 0
