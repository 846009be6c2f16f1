"""Rigid transforms and pinhole projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DomainError


def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return (
        np.eye(3)
        + np.sin(theta) / theta * W
        + (1.0 - np.cos(theta)) / theta**2 * W @ W
    )


def _left_jacobian(w) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * W @ W
    )


def rotation_angle(R) -> float:
    """Rotation angle of ``R`` in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``x -> R x + t``.

    Tangent increments are ordered ``xi = (v, w)`` (translation first) and
    applied on the left: ``exp(xi) * T``.
    """

    R: np.ndarray
    t: np.ndarray
    # quaternion the rotation was built from, kept so file round trips are exact
    _quat: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) <= 0:
            raise DomainError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def exp(cls, xi) -> "PoseSE3":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        v, w = xi[:3], xi[3:]
        return cls(so3_exp(w), _left_jacobian(w) @ v)

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quaternion(cls, t, q_xyzw) -> "PoseSE3":
        q = np.asarray(q_xyzw, dtype=np.float64)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise DomainError("quaternion has zero norm")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        R = Rotation.from_quat(q).as_matrix()
        q = (-q if q[3] < 0 else q).copy()
        q.setflags(write=False)
        return cls(_orthonormalize(R), t, q)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        if self._quat is not None:
            return self._quat.copy()
        q = Rotation.from_matrix(self.R).as_quat()
        return -q if q[3] < 0 else q

    def log(self) -> np.ndarray:
        w = Rotation.from_matrix(self.R).as_rotvec()
        v = np.linalg.solve(_left_jacobian(w), self.t)
        return np.concatenate([v, w])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(_orthonormalize(self.R @ other.R), self.R @ other.t + self.t)

    def apply(self, points) -> np.ndarray:
        """Transform ``(..., 3)`` points."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def retract(self, xi) -> "PoseSE3":
        return PoseSE3.exp(xi) @ self

    def rotation_deg(self) -> float:
        return float(np.degrees(rotation_angle(self.R)))


def _orthonormalize(R) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def shape(self):
        return (self.height, self.width)

    def scaled(self, level: int) -> "PinholeCamera":
        """Intrinsics for a pyramid level built by 2x2 averaging."""
        s = 0.5**level
        return PinholeCamera(
            self.fx * s,
            self.fy * s,
            (self.cx + 0.5) * s - 0.5,
            (self.cy + 0.5) * s - 0.5,
            self.width >> level,
            self.height >> level,
        )

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        z = X[..., 2]
        return np.stack([self.fx * X[..., 0] / z + self.cx, self.fy * X[..., 1] / z + self.cy], axis=-1)

    def backproject(self, uv, inverse_depth) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        z = 1.0 / np.asarray(inverse_depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x * z, y * z, z], axis=-1)

    def rays(self, uv) -> np.ndarray:
        """Unnormalized viewing rays with unit z."""
        uv = np.asarray(uv, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)
