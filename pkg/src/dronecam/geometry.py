"""SE(3) pose and motion arithmetic shared by every other module.

Conventions (used consistently across the package):
  - Quaternions are Hamilton, stored (w, x, y, z), always unit norm with a
    canonical sign (w >= 0; if w == 0, the first nonzero component is >= 0).
  - The camera frame is the pinhole convention: +z is the optical (forward)
    axis, +x right, +y down.
  - A pose's rotation matrix R maps camera-frame vectors into the global
    frame: v_global = R @ v_camera.
  - Motions (linear and angular velocity) are expressed in the local camera
    frame, in world units per second and radians per second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

QUAT_NORM_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid argument to a geometry operation (non-finite, degenerate)."""


def _as_finite(vec, size: int, name: str) -> np.ndarray:
    arr = np.asarray(vec, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise GeometryError(f"{name} must have {size} components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} has non-finite components: {arr}")
    return arr


def canonicalize_quat(q: np.ndarray) -> np.ndarray:
    """Normalize and flip sign so w >= 0 (first nonzero component >= 0 if w == 0)."""
    q = np.asarray(q, dtype=float)
    norm = math.sqrt(float(q @ q))
    if norm < 1e-12:
        raise GeometryError("quaternion norm is near zero")
    q = q / norm
    for c in q:
        if c > 0.0:
            break
        if c < 0.0:
            q = -q
            break
    return q


def quat_compose(q1, q2) -> np.ndarray:
    """Hamilton product q1 * q2 (apply q2's rotation first, then q1's)."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def quat_inverse(q) -> np.ndarray:
    """Inverse of a quaternion (conjugate divided by squared norm)."""
    q = np.asarray(q, dtype=float)
    norm_sq = float(q @ q)
    if norm_sq < 1e-12:
        raise GeometryError("cannot invert a near-zero-norm quaternion")
    return np.array([q[0], -q[1], -q[2], -q[3]]) / norm_sq


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion; columns are the camera axes in global coords."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def exp_map(rotvec) -> np.ndarray:
    """Axis-angle vector -> unit quaternion."""
    v = _as_finite(rotvec, 3, "rotation vector")
    angle = math.sqrt(float(v @ v))
    if angle < 1e-12:
        # first-order expansion; keeps exp/log round trips exact near zero
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return q / math.sqrt(float(q @ q))
    axis = v / angle
    half = 0.5 * angle
    s = math.sin(half)
    return np.array([math.cos(half), s * axis[0], s * axis[1], s * axis[2]])


def log_map(q) -> np.ndarray:
    """Unit quaternion -> shortest-arc axis-angle vector (angle < pi)."""
    q = np.asarray(q, dtype=float)
    norm = math.sqrt(float(q @ q))
    if norm < 1e-12:
        raise GeometryError("cannot take log of a near-zero-norm quaternion")
    q = q / norm
    if q[0] < 0.0:  # shortest-arc branch
        q = -q
    w = min(q[0], 1.0)
    vec = q[1:]
    vec_norm = math.sqrt(float(vec @ vec))
    if vec_norm < 1e-12:
        return 2.0 * vec  # small-angle: log(q) ~ 2 * (x, y, z)
    angle = 2.0 * math.atan2(vec_norm, w)
    return (angle / vec_norm) * vec


def quat_distance(q1, q2) -> float:
    """Sign-invariant distance between unit quaternions: min over +/- of the norm difference."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    return float(min(np.linalg.norm(q1 - q2), np.linalg.norm(q1 + q2)))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera position + orientation (unit quaternion) in a clip's global frame."""

    position: np.ndarray
    orientation: np.ndarray

    def __init__(self, position, orientation):
        pos = _as_finite(position, 3, "position")
        quat = _as_finite(orientation, 4, "orientation")
        quat = canonicalize_quat(quat)
        pos.setflags(write=False)
        quat.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", quat)

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def as_vector(self) -> np.ndarray:
        """(x, y, z, qw, qx, qy, qz) as a 7-vector."""
        return np.concatenate([self.position, self.orientation])

    @staticmethod
    def from_vector(vec) -> "CameraPose":
        v = _as_finite(vec, 7, "pose vector")
        return CameraPose(v[:3], v[3:])

    def compose(self, other: "CameraPose") -> "CameraPose":
        """This pose applied to `other` (other expressed in this pose's frame)."""
        return CameraPose(
            self.position + self.rotation_matrix() @ other.position,
            quat_compose(self.orientation, other.orientation),
        )

    def inverse(self) -> "CameraPose":
        q_inv = quat_inverse(self.orientation)
        return CameraPose(-(quat_to_matrix(q_inv) @ self.position), q_inv)

    def allclose(self, other: "CameraPose", tol: float = 1e-9) -> bool:
        return (
            float(np.max(np.abs(self.position - other.position))) <= tol
            and quat_distance(self.orientation, other.orientation) <= tol
        )


@dataclass(frozen=True, eq=False)
class CameraMotion:
    """Linear and angular velocity in the local camera frame."""

    linear_velocity: np.ndarray
    angular_velocity: np.ndarray

    def __init__(self, linear_velocity, angular_velocity):
        lin = _as_finite(linear_velocity, 3, "linear_velocity")
        ang = _as_finite(angular_velocity, 3, "angular_velocity")
        lin.setflags(write=False)
        ang.setflags(write=False)
        object.__setattr__(self, "linear_velocity", lin)
        object.__setattr__(self, "angular_velocity", ang)

    @staticmethod
    def zero() -> "CameraMotion":
        return CameraMotion(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        """(vx, vy, vz, wx, wy, wz) as a 6-vector."""
        return np.concatenate([self.linear_velocity, self.angular_velocity])

    @staticmethod
    def from_vector(vec) -> "CameraMotion":
        v = _as_finite(vec, 6, "motion vector")
        return CameraMotion(v[:3], v[3:])


def relative_motion(pose_a: CameraPose, pose_b: CameraPose, dt: float) -> CameraMotion:
    """Motion that carries pose_a to pose_b over dt seconds, in pose_a's local frame."""
    if not (np.isfinite(dt) and dt > 0.0):
        raise GeometryError(f"dt must be positive and finite, got {dt}")
    r_a = pose_a.rotation_matrix()
    linear = r_a.T @ (pose_b.position - pose_a.position) / dt
    q_rel = quat_compose(quat_inverse(pose_a.orientation), pose_b.orientation)
    angular = log_map(q_rel) / dt
    return CameraMotion(linear, angular)


def integrate_motion(pose: CameraPose, motion: CameraMotion, dt: float) -> CameraPose:
    """Advance a pose by a local-frame motion over dt seconds; inverse of relative_motion."""
    if not (np.isfinite(dt) and dt > 0.0):
        raise GeometryError(f"dt must be positive and finite, got {dt}")
    r = pose.rotation_matrix()
    position = pose.position + r @ motion.linear_velocity * dt
    orientation = quat_compose(pose.orientation, exp_map(motion.angular_velocity * dt))
    return CameraPose(position, orientation)


def rebase_poses(poses: list[CameraPose], base: CameraPose | None = None) -> list[CameraPose]:
    """Re-express poses so that `base` (default: the first pose) becomes the identity."""
    if not poses:
        return []
    base_inv = (base or poses[0]).inverse()
    return [base_inv.compose(p) for p in poses]


def look_at_pose(position, forward, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose at `position` with the optical axis along `forward` (world z is up).

    The camera's +x (right) is chosen perpendicular to world up; degenerate
    straight-up/down forward directions fall back to world +x as right.
    """
    pos = _as_finite(position, 3, "position")
    fwd = _as_finite(forward, 3, "forward")
    norm = np.linalg.norm(fwd)
    if norm < 1e-12:
        raise GeometryError("forward direction must be nonzero")
    fwd = fwd / norm
    upv = _as_finite(up, 3, "up")
    right = np.cross(fwd, upv)
    right_norm = np.linalg.norm(right)
    if right_norm < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
        right = right - fwd * float(right @ fwd)
        right = right / np.linalg.norm(right)
    else:
        right = right / right_norm
    down = np.cross(fwd, right)
    rot = np.column_stack([right, down, fwd])
    return CameraPose(pos, matrix_to_quat(rot))


def matrix_to_quat(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix -> canonical unit quaternion (Shepperd's method)."""
    m = np.asarray(rot, dtype=float)
    if m.shape != (3, 3):
        raise GeometryError(f"rotation matrix must be 3x3, got {m.shape}")
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0.0:
        s = math.sqrt(trace + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return canonicalize_quat(q)
