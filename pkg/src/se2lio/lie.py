"""SO(3)/SE(3) primitives and the yaw-only SE(2) embedding.

Rotations are 3x3 matrices, rigid transforms 4x4 homogeneous matrices.
Tangent vectors of SE(3) are ordered (rotation, translation).
"""
from __future__ import annotations

import numpy as np

EXP_SMALL_ANGLE = 1e-8
JR_INV_SMALL_ANGLE = 1e-5
ORTHO_TOL = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula, with a second-order Taylor branch near zero."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < EXP_SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal rotation vector with norm in [0, pi].

    Raises ValueError when ``R`` is not orthonormal within 1e-6.
    """
    R = np.asarray(R, dtype=float)
    check_rotation(R)
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-6:
        # first-order: R ~ I + [phi]^ ; the cubic correction keeps 1e-12 accuracy
        w = vee(0.5 * (R - R.T))
        return w * (1.0 + theta**2 / 6.0)
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; recover the axis from the symmetric part
        # symmetric part = cos(t) I + (1 - cos(t)) a a^T
        B = (0.5 * (R + R.T) - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.linalg.norm(B[:, k])
        # fix the sign using the (small) antisymmetric part
        w = vee(0.5 * (R - R.T))
        if w @ axis < 0.0:
            axis = -axis
        # refine theta from the antisymmetric part, which stays accurate here
        s = np.linalg.norm(w)
        theta = np.arctan2(s, cos_theta) if s > 0.0 else np.pi
        return axis * theta
    return vee(0.5 * (R - R.T)) * (theta / np.sin(theta))


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < JR_INV_SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3)
            - (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3).

    Satisfies log(exp(phi) exp(d)) ~ phi + Jr^-1(phi) d to first order in d.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < JR_INV_SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * K @ K


def left_jacobian(phi: np.ndarray) -> np.ndarray:
    return right_jacobian(-np.asarray(phi, dtype=float))


def left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return right_jacobian_inv(-np.asarray(phi, dtype=float))


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(R: np.ndarray) -> float:
    return float(np.arctan2(R[1, 0], R[0, 0]))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = float(np.mod(a + np.pi, 2.0 * np.pi) - np.pi)
    return np.pi if w == -np.pi else w


def se2_lift(yaw: float, d) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation of a planar pose embedded in SE(3).

    The rotation is exp([0, 0, yaw]^) built from cos/sin so the third row and
    column are exactly (0, 0, 1); the z translation is exactly zero.
    """
    return yaw_rotation(yaw), np.array([float(d[0]), float(d[1]), 0.0])


def skew_many(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1, 3)
    K = np.zeros((len(v), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -v[:, 2], v[:, 1]
    K[:, 1, 0], K[:, 1, 2] = v[:, 2], -v[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -v[:, 1], v[:, 0]
    return K


def _exp_coefficients(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with Taylor series near zero."""
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / t**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / t**3)
    return a, b, c


def so3_exp_many(phi: np.ndarray) -> np.ndarray:
    """Vectorised ``so3_exp`` over rows of an (n, 3) array."""
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    a, b, _ = _exp_coefficients(np.linalg.norm(phi, axis=1))
    K = skew_many(phi)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def se3_exp_many(xi: np.ndarray) -> np.ndarray:
    """Vectorised ``se3_exp`` over rows of an (n, 6) array."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    phi, rho = xi[:, :3], xi[:, 3:]
    a, b, c = _exp_coefficients(np.linalg.norm(phi, axis=1))
    K = skew_many(phi)
    KK = K @ K
    T = np.tile(np.eye(4), (len(xi), 1, 1))
    T[:, :3, :3] = np.eye(3) + a[:, None, None] * K + b[:, None, None] * KK
    Jl = np.eye(3) + b[:, None, None] * K + c[:, None, None] * KK
    T[:, :3, 3] = np.einsum("nij,nj->ni", Jl, rho)
    return T


def make_transform(R: np.ndarray, P: np.ndarray) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = P
    return T


def inverse_transform(T: np.ndarray) -> np.ndarray:
    R, P = T[:3, :3], T[:3, 3]
    return make_transform(R.T, -R.T @ P)


def se3_exp(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return make_transform(so3_exp(phi), left_jacobian(phi) @ rho)


def se3_log(T: np.ndarray) -> np.ndarray:
    phi = so3_log(T[:3, :3])
    rho = left_jacobian_inv(phi) @ T[:3, 3]
    return np.concatenate([phi, rho])


def transform_points(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ T[:3, :3].T + T[:3, 3]


def quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """(qx, qy, qz, qw) with qw >= 0."""
    from scipy.spatial.transform import Rotation

    q = Rotation.from_matrix(R).as_quat()
    return -q if q[3] < 0 else q


def rotation_from_quat(q) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()
