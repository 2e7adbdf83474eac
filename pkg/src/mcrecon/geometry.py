"""Rigid-body algebra, pinhole projection and reprojection Jacobians.

Conventions
-----------
* ``PoseSE3`` is camera-to-world: ``x_world = R @ x_cam + t``.
* Twists are ordered ``(wx, wy, wz, tx, ty, tz)``: rotation first.
* Pose perturbations are right-multiplied: ``T <- T @ exp(delta)``.
* The relative transform used for reprojection from frame i into frame j is
  ``T_ij = inverse(T_j) @ T_i``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NonPositiveDisparity

Z_MIN = 1e-4
SMALL_ANGLE = 1e-8
BOUNDS_EPS = 1e-9


def hat(v):
    """Skew-symmetric matrix of a 3-vector (batched over leading dims)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self, u):
        """Camera-frame rays ``K^-1 (x, y, 1)`` for pixel coordinates ``u`` (..., 2)."""
        u = np.asarray(u, dtype=float)
        out = np.empty(u.shape[:-1] + (3,))
        out[..., 0] = (u[..., 0] - self.cx) / self.fx
        out[..., 1] = (u[..., 1] - self.cy) / self.fy
        out[..., 2] = 1.0
        return out

    def project(self, q):
        """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
        q = np.asarray(q, dtype=float)
        z = q[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.fx * q[..., 0] / z + self.cx
            y = self.fy * q[..., 1] / z + self.cy
        return np.stack([x, y], axis=-1)

    def in_bounds(self, u):
        # lower edge tolerates round-off so that identity reprojection keeps column/row 0
        lo = -BOUNDS_EPS
        return (u[..., 0] >= lo) & (u[..., 0] < self.width) & (u[..., 1] >= lo) & (u[..., 1] < self.height)

    def scaled(self, factor):
        """Intrinsics for an image resampled by ``factor`` (pixel-centre convention kept)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            max(1, int(round(self.width * factor))),
            max(1, int(round(self.height * factor))),
        )


def pixel_grid(height, width):
    """Row-major ``(H, W, 2)`` grid of integer pixel coordinates ``(x, y)``."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(float)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other):
        if isinstance(other, PoseSE3):
            return se3_compose(self, other)
        return NotImplemented

    def inverse(self):
        return se3_inverse(self)

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def is_valid(self, tol=1e-9):
        R = self.rotation
        return (
            np.linalg.norm(R.T @ R - np.eye(3)) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol
            and np.all(np.isfinite(self.translation))
        )

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"PoseSE3(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def se3_compose(a, b):
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(a):
    Rt = a.rotation.T
    return PoseSE3(Rt, -Rt @ a.translation)


def relative_pose(T_i, T_j):
    """``T_ij = inverse(T_j) @ T_i``: maps camera-i coordinates into camera j."""
    return se3_compose(se3_inverse(T_j), T_i)


def so3_exp(omega):
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * W @ W


def _left_jacobian_so3(omega):
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * W @ W
    )


def se3_exp(delta):
    """Exponential map from a twist ``(omega, t)`` to a pose."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    omega, rho = delta[:3], delta[3:]
    return PoseSE3(so3_exp(omega), _left_jacobian_so3(omega) @ rho)


def se3_log(pose):
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    omega = Rotation.from_matrix(pose.rotation).as_rotvec()
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < SMALL_ANGLE:
        V_inv = np.eye(3) - 0.5 * W + W @ W / 12.0
    else:
        half = 0.5 * theta
        coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
        V_inv = np.eye(3) - 0.5 * W + coef * W @ W
    return np.concatenate([omega, V_inv @ pose.translation])


def se3_adjoint_algebra(delta):
    """Matrix of ``ad_delta`` acting on twists in ``(omega, t)`` order."""
    delta = np.asarray(delta, dtype=float)
    ad = np.zeros((6, 6))
    Wo = hat(delta[:3])
    ad[:3, :3] = Wo
    ad[3:, :3] = hat(delta[3:])
    ad[3:, 3:] = Wo
    return ad


def se3_right_jacobian(delta, terms=24):
    """Right Jacobian of the SE(3) exponential.

    ``exp(delta + eps) ~= exp(delta) @ exp(J_r(delta) @ eps)``; evaluated from
    its power series, which converges for every twist.
    """
    ad = -se3_adjoint_algebra(delta)
    J = np.eye(6)
    term = np.eye(6)
    for k in range(1, terms):
        term = term @ ad / (k + 1)
        J = J + term
    return J


@dataclass(frozen=True, eq=False)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("Sim3 scale must be positive")
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points):
        return self.scale * (np.asarray(points, dtype=float) @ self.rotation.T) + self.translation

    def apply_pose(self, pose):
        """Transform a camera-to-world pose; camera-frame scale is left to the caller."""
        return PoseSE3(self.rotation @ pose.rotation, self.apply(pose.translation))

    def inverse(self):
        Rt = self.rotation.T
        return Sim3(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)


def unproject(u, disparity, K, mask=None):
    """Back-project pixels with disparity (inverse depth) to camera-frame points."""
    disparity = np.asarray(disparity, dtype=float)
    check = disparity if mask is None else disparity[np.asarray(mask, dtype=bool)]
    if np.any(~(check > 0)):
        raise NonPositiveDisparity("disparity must be positive at every valid pixel")
    with np.errstate(divide="ignore"):
        depth = 1.0 / disparity
    return K.rays(u) * depth[..., None]


class Reprojection(NamedTuple):
    """Result of reprojecting a pixel field from frame i into frame j."""

    pixels: np.ndarray  # (..., 2)
    depth: np.ndarray  # (...) z in camera j
    valid: np.ndarray  # (...) bool
    d_pose_i: np.ndarray = None  # (..., 2, 6)
    d_pose_j: np.ndarray = None  # (..., 2, 6)
    d_disp: np.ndarray = None  # (..., 2)


def _transform(p, T_ij):
    return p @ T_ij.rotation.T + T_ij.translation


def reproject(u_i, d_i, K_i, K_j, T_ij, mask=None):
    """``u_ij = K_j (T_ij o K_i^-1 (u_i, d_i))`` with a validity mask.

    Pixels are invalid when the transformed point has ``z <= Z_MIN`` or lands
    outside ``[0, W_j) x [0, H_j)``.
    """
    p = unproject(u_i, d_i, K_i, mask)
    q = _transform(p, T_ij)
    z = q[..., 2]
    front = z > Z_MIN
    u = K_j.project(np.where(front[..., None], q, np.array([0.0, 0.0, 1.0])))
    valid = front & K_j.in_bounds(u)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    return Reprojection(u, z, valid)


def projection_jacobian(q, K):
    """d(pixel)/d(point) for camera-frame points ``q`` (..., 3) -> (..., 2, 3)."""
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    inv_z = 1.0 / z
    J = np.zeros(q.shape[:-1] + (2, 3))
    J[..., 0, 0] = K.fx * inv_z
    J[..., 0, 2] = -K.fx * x * inv_z * inv_z
    J[..., 1, 1] = K.fy * inv_z
    J[..., 1, 2] = -K.fy * y * inv_z * inv_z
    return J


def point_jacobians(p, q, T_ij):
    """Derivatives of ``q = T_ij p`` wrt right twists of T_i and T_j.

    Returns ``(dq/d delta_i, dq/d delta_j)`` each shaped (..., 3, 6).
    """
    R = T_ij.rotation
    Ji = np.empty(p.shape[:-1] + (3, 6))
    Ji[..., :, :3] = -R @ hat(p)
    Ji[..., :, 3:] = R
    Jj = np.empty(q.shape[:-1] + (3, 6))
    Jj[..., :, :3] = hat(q)
    Jj[..., :, 3:] = -np.eye(3)
    return Ji, Jj


def reproject_jacobians(u_i, d_i, K_i, K_j, T_ij, mask=None):
    """Reprojection plus analytic Jacobians wrt both pose twists and disparity.

    Jacobians are reported for every pixel; callers should ignore entries
    where ``valid`` is false.
    """
    d_i = np.asarray(d_i, dtype=float)
    p = unproject(u_i, d_i, K_i, mask)
    q = _transform(p, T_ij)
    z = q[..., 2]
    front = z > Z_MIN
    q_safe = np.where(front[..., None], q, np.array([0.0, 0.0, 1.0]))
    u = K_j.project(q_safe)
    valid = front & K_j.in_bounds(u)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    Jproj = projection_jacobian(q_safe, K_j)
    Jqi, Jqj = point_jacobians(p, q, T_ij)
    dq_dd = -(p @ T_ij.rotation.T) / d_i[..., None]
    J_i = Jproj @ Jqi
    J_j = Jproj @ Jqj
    J_d = np.einsum("...ab,...b->...a", Jproj, dq_dd)
    return Reprojection(u, z, valid, J_i, J_j, J_d)
