"""SE(3) helpers, the inverse-depth pinhole camera and relative rig poses.

Conventions used everywhere in the package:

* Twists are 6-vectors ``(rho, omega)``: translational part first, then the
  axis-angle rotational part.
* Pose updates are left-multiplicative, ``P <- exp(xi) @ P``.
* Pixels are ``(u, v)`` with ``u`` to the right and ``v`` down; pixel
  centres sit on integer coordinates and the origin is the top-left pixel.
* Homogeneous points are ``(x, y, z, w)`` with ``w`` the inverse depth, so
  the Euclidean point is ``(x, y, z) / w``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import AngleAtBranchCut, BehindCamera, ValidationError

EPS_Z = 1e-6
_SMALL_ANGLE = 1e-8


def hat3(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (broadcasts over leading axes)."""
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def twist_hat(xi: np.ndarray) -> np.ndarray:
    """4x4 Lie-algebra matrix of a twist ``(rho, omega)``."""
    xi = np.asarray(xi, dtype=np.float64)
    m = np.zeros((4, 4))
    m[:3, :3] = hat3(xi[3:])
    m[:3, 3] = xi[:3]
    return m


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform stored as a unit quaternion ``(qx, qy, qz, qw)`` and a translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValidationError("quaternion must be finite and non-zero")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        # leave already-unit quaternions untouched so that text round trips are exact
        object.__setattr__(self, "rotation", q / n if abs(n - 1.0) > 4e-16 else q.copy())
        object.__setattr__(self, "translation", t.copy())

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat(), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_rt(R.T, -R.T @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        R = self.R
        return Pose.from_rt(R @ other.R, R @ other.translation + self.translation)

    def act(self, points: np.ndarray) -> np.ndarray:
        """Apply to Euclidean points of shape (..., 3)."""
        return np.asarray(points) @ self.R.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol))

    def __repr__(self) -> str:
        q = ", ".join(f"{x:.6g}" for x in self.rotation)
        t = ", ".join(f"{x:.6g}" for x in self.translation)
        return f"Pose(q=[{q}], t=[{t}])"


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    W = hat3(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1.0 - np.cos(theta)) / theta**2 * W @ W


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = hat3(omega)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    a = (1.0 - np.cos(theta)) / theta**2
    b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * W + b * W @ W


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    W = hat3(omega)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    c = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * W + c * W @ W


def se3_exp(xi) -> Pose:
    """Exponential map from a twist ``(rho, omega)`` to a pose."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, omega = xi[:3], xi[3:]
    return Pose.from_rt(so3_exp(omega), _left_jacobian(omega) @ rho)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q[3] < 0.0:
        q = -q
    v = q[:3]
    s = np.linalg.norm(v)
    theta = 2.0 * np.arctan2(s, q[3])
    if abs(theta - np.pi) < 1e-9:
        raise AngleAtBranchCut(f"rotation angle {theta!r} is at the branch cut")
    if s < 1e-12:
        # sin(theta/2)/(theta/2) -> 1
        return 2.0 * v / q[3]
    return theta * v / s


def se3_log(p: Pose) -> np.ndarray:
    """Logarithm of a pose on the principal branch, returned as ``(rho, omega)``."""
    omega = so3_log_quat(p.rotation)
    rho = _left_jacobian_inv(omega) @ p.translation
    return np.concatenate([rho, omega])


def se3_adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint for ``(rho, omega)`` ordering: ``[[R, [t]x R], [0, R]]``."""
    return adjoint_matrix(p.matrix())


def adjoint_matrix(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    adj = np.zeros((6, 6))
    adj[:3, :3] = R
    adj[3:, 3:] = R
    adj[:3, 3:] = hat3(T[:3, 3]) @ R
    return adj


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
            raise ValidationError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValidationError("image size must be integral")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "Intrinsics":
        """Square-pixel camera with the given horizontal field of view, centred principal point."""
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) array of pixel coordinates ``(u, v)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([u, v], axis=-1)

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        u, v = uv[..., 0], uv[..., 1]
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    extrinsic: Pose  # camera -> rig reference frame


@dataclass(frozen=True)
class Rig:
    cameras: tuple[Camera, ...]
    reference_camera: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ValidationError("a rig needs at least one camera")
        if not 0 <= self.reference_camera < len(self.cameras):
            raise ValidationError("reference camera index out of range")

    def __len__(self) -> int:
        return len(self.cameras)

    def intrinsics(self, c: int) -> Intrinsics:
        return self.cameras[c].intrinsics

    def extrinsic(self, c: int) -> Pose:
        return self.cameras[c].extrinsic


def unproject(intr: Intrinsics, pixel, inv_depth) -> np.ndarray:
    """Back-project pixels to homogeneous points ``((u-cx)/fx, (v-cy)/fy, 1, d)``.

    ``pixel`` has shape (..., 2) and ``inv_depth`` broadcasts against
    ``pixel[..., 0]``.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    d = np.broadcast_to(np.asarray(inv_depth, dtype=np.float64), pixel.shape[:-1])
    out = np.empty(pixel.shape[:-1] + (4,))
    out[..., 0] = (pixel[..., 0] - intr.cx) / intr.fx
    out[..., 1] = (pixel[..., 1] - intr.cy) / intr.fy
    out[..., 2] = 1.0
    out[..., 3] = d
    return out


def project_masked(intr: Intrinsics, point: np.ndarray, eps_z: float = EPS_Z):
    """Vectorised projection returning ``(uv, valid)``.

    Invalid entries (``z <= eps_z``) get ``uv = 0``.
    """
    point = np.asarray(point, dtype=np.float64)
    z = point[..., 2]
    valid = z > eps_z
    zs = np.where(valid, z, 1.0)
    uv = np.empty(point.shape[:-1] + (2,))
    uv[..., 0] = intr.fx * point[..., 0] / zs + intr.cx
    uv[..., 1] = intr.fy * point[..., 1] / zs + intr.cy
    uv[~valid] = 0.0
    return uv, valid


def project(intr: Intrinsics, point, eps_z: float = EPS_Z) -> np.ndarray:
    uv, valid = project_masked(intr, point, eps_z)
    if not np.all(valid):
        raise BehindCamera(f"{np.count_nonzero(~valid)} point(s) with z <= {eps_z}")
    return uv


def project_jacobian(intr: Intrinsics, point, eps_z: float = EPS_Z) -> np.ndarray:
    """d project / d point, shape (..., 2, 4); the inverse-depth column is zero."""
    point = np.asarray(point, dtype=np.float64)
    z = point[..., 2]
    if np.any(z <= eps_z):
        raise BehindCamera(f"{np.count_nonzero(z <= eps_z)} point(s) with z <= {eps_z}")
    return _project_jacobian_unchecked(intr, point)


def _project_jacobian_unchecked(intr: Intrinsics, point: np.ndarray) -> np.ndarray:
    x, y, z = point[..., 0], point[..., 1], point[..., 2]
    inv_z = 1.0 / z
    J = np.zeros(point.shape[:-1] + (2, 4))
    J[..., 0, 0] = intr.fx * inv_z
    J[..., 0, 2] = -intr.fx * x * inv_z**2
    J[..., 1, 1] = intr.fy * inv_z
    J[..., 1, 2] = -intr.fy * y * inv_z**2
    return J


def relative_pose(P_ti: Pose, P_tj: Pose, T_ci: Pose, T_cj: Pose) -> Pose:
    """Transform taking points of frame i into frame j: ``(P_tj T_cj)^-1 P_ti T_ci``."""
    return (P_tj @ T_cj).inverse() @ (P_ti @ T_ci)


def relative_pose_matrix(P_ti, P_tj, T_ci, T_cj) -> np.ndarray:
    """Matrix version of :func:`relative_pose` taking 4x4 arrays."""
    return np.linalg.inv(P_tj @ T_cj) @ (P_ti @ T_ci)


def transform_homogeneous(T: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Apply a 4x4 transform to homogeneous points of shape (..., 4)."""
    return X @ T.T
