"""Camera rays, pose containers, axis orthogonalisation and oriented boxes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


class InvalidDepthError(GeometryError):
    pass


class DegenerateAxesError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass
class Pose:
    """Rotation ``R`` (columns are object axes in camera frame), centre ``t`` and box extents ``s``."""

    R: np.ndarray
    t: np.ndarray
    s: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(3)

    def validate(self, tol: float = 1e-9) -> None:
        if not is_rotation(self.R, tol):
            raise GeometryError("R is not a proper rotation")
        if np.any(self.s <= 0):
            raise GeometryError(f"extents must be positive, got {self.s}")


@dataclass
class AxisPair:
    a_x: np.ndarray
    a_z: np.ndarray
    c_x: float = 1.0
    c_z: float = 1.0


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    return (R.shape == (3, 3)
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def ray_direction(K: CameraIntrinsics, u, v) -> np.ndarray:
    """Unit vector from the camera centre through pixel (u, v). Vectorised over u, v."""
    x = (np.asarray(u, dtype=np.float64) - K.cx) / K.fx
    y = (np.asarray(v, dtype=np.float64) - K.cy) / K.fy
    d = np.stack(np.broadcast_arrays(x, y, np.ones_like(x)), axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def backproject(K: CameraIntrinsics, u, v, d) -> np.ndarray:
    """Camera-frame point K^-1 (u, v, 1)^T * d; ``d`` is z-depth. Vectorised."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise InvalidDepthError("depth must be strictly positive")
    x = (np.asarray(u, dtype=np.float64) - K.cx) / K.fx
    y = (np.asarray(v, dtype=np.float64) - K.cy) / K.fy
    x, y, d = np.broadcast_arrays(x, y, d)
    return np.stack([x * d, y * d, d], axis=-1)


def project(K: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.stack([K.fx * p[..., 0] / p[..., 2] + K.cx, K.fy * p[..., 1] / p[..., 2] + K.cy], axis=-1)


def _unit(v: np.ndarray) -> np.ndarray:
    # leave vectors that are unit to within rounding untouched (keeps re-application exact)
    n = np.linalg.norm(v)
    return v if abs(n - 1.0) <= 1e-15 else v / n


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = _unit(np.asarray(axis, dtype=np.float64))
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1.0 - np.cos(angle)) * (Kx @ Kx)


def correction_angles(pair: AxisPair) -> tuple[float, float, float]:
    """(theta, theta_x, theta_z): inter-axis angle and the confidence-weighted corrections."""
    ax, az = _unit(np.asarray(pair.a_x, float)), _unit(np.asarray(pair.a_z, float))
    dot = float(np.clip(ax @ az, -1.0, 1.0))
    theta = float(np.arctan2(np.linalg.norm(np.cross(ax, az)), dot))
    delta = theta - np.pi / 2
    w = pair.c_x + pair.c_z
    return theta, pair.c_z / w * delta, pair.c_x / w * delta


def orthogonalize_axes(pair: AxisPair, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Rotate both axes inside their common plane until they are perpendicular.

    The angular defect ``theta - pi/2`` is split by confidence: the x axis
    turns by ``c_z/(c_x+c_z)`` of it and the z axis by ``c_x/(c_x+c_z)``,
    so the more confident axis moves less.
    """
    ax = _unit(np.asarray(pair.a_x, dtype=np.float64))
    az = _unit(np.asarray(pair.a_z, dtype=np.float64))
    dot = float(ax @ az)
    if abs(dot) >= 1.0 - 1e-9:
        raise DegenerateAxesError(f"axes are (anti)parallel, dot={dot:.12f}")
    if abs(dot) < tol:
        return ax, az
    n = np.cross(ax, az)
    n /= np.linalg.norm(n)
    _, th_x, th_z = correction_angles(AxisPair(ax, az, pair.c_x, pair.c_z))
    # rotation by +phi about n moves ax towards az
    ax_new = np.cos(th_x) * ax + np.sin(th_x) * np.cross(n, ax)
    az_new = np.cos(-th_z) * az + np.sin(-th_z) * np.cross(n, az)
    return _unit(ax_new), _unit(az_new)


def rotation_from_axes(a_x: np.ndarray, a_z: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Assemble R = [a_x, a_z x a_x, a_z] from an orthonormal axis pair."""
    a_x = np.asarray(a_x, dtype=np.float64)
    a_z = np.asarray(a_z, dtype=np.float64)
    if (abs(np.linalg.norm(a_x) - 1) > tol or abs(np.linalg.norm(a_z) - 1) > tol
            or abs(a_x @ a_z) > tol):
        raise GeometryError("rotation_from_axes needs an orthonormal pair; orthogonalize first")
    z = a_z / np.linalg.norm(a_z)
    x = a_x - (a_x @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


# Gray code over (x, y, z) sign bits, x most significant; 0 -> minus, 1 -> plus.
CORNER_SIGNS = np.array(
    [[(g >> 2) & 1, (g >> 1) & 1, g & 1] for g in (k ^ (k >> 1) for k in range(8))],
    dtype=np.float64) * 2.0 - 1.0


def box_corners(pose: Pose) -> np.ndarray:
    """8x3 corners of the oriented box, ordered by ``CORNER_SIGNS``."""
    local = CORNER_SIGNS * (pose.s / 2.0)
    return local @ pose.R.T + pose.t


def rotation_geodesic_degrees(R1: np.ndarray, R2: np.ndarray) -> float:
    """Angle of R1^T R2, in degrees.

    Evaluated as atan2(sin, cos) rather than arccos of the trace so that
    tiny angles keep full precision; the value is the same.
    """
    M = np.asarray(R1).T @ np.asarray(R2)
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return float(np.degrees(np.arctan2(min(s, 1.0), c)))


def angle_between_degrees(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))


def symmetric_rotation_error_degrees(R_est: np.ndarray, R_gt: np.ndarray, symmetric: bool) -> float:
    if symmetric:
        return angle_between_degrees(np.asarray(R_est)[:, 2], np.asarray(R_gt)[:, 2])
    return rotation_geodesic_degrees(R_est, R_gt)
