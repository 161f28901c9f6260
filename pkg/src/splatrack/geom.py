"""Quaternion / SE(3) algebra and the pinhole camera model.

Conventions used everywhere in this package:

- Quaternions are numpy arrays ``[w, x, y, z]`` (scalar first) and unit
  norm unless stated otherwise.  ``q`` and ``-q`` encode the same rotation.
- A :class:`Pose` maps object-frame points into the camera frame:
  ``x_cam = R(q) @ x_obj + t``.
- Image coordinates: ``u`` along columns (x), ``v`` along rows (y); the
  sample position of pixel ``(row, col)`` is ``(u, v) = (col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q scaled to unit norm. Raises on (near-)zero input."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 ⊗ q2 (no renormalization)."""
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


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z).

    The formula assumes ``|q| = 1``; callers that optimize quaternion
    components unconstrained must renormalize before converting.
    """
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_matrices(q: np.ndarray) -> np.ndarray:
    """Batched :func:`quat_to_matrix` for an (N, 4) array -> (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed unit quaternion (Gaussian-vector trick)."""
    q = rng.standard_normal(4)
    return quat_normalize(q)


def rotation_distance(q1: np.ndarray, q2: np.ndarray) -> float:
    """Angular distance in radians between two unit quaternions, in [0, π].

    Folds the double cover: ``2·arccos(|(q1 ⊗ conj(q2)).w|)``, so sign
    flips of either argument do not change the result.
    """
    w = abs(float(np.dot(q1, q2)))  # (q1 ⊗ conj(q2)).w == <q1, q2>
    return 2.0 * np.arccos(min(1.0, w))


def rotation_angle_raw(q1: np.ndarray, q2: np.ndarray) -> float:
    """Unfolded relative angle ``2·arccos((q1 ⊗ conj(q2)).w)`` in [0, 2π].

    Exposed for exact reproduction of reports that skip the double-cover
    fold; prefer :func:`rotation_distance` for metrics.
    """
    w = float(np.dot(q1, q2))
    return 2.0 * np.arccos(np.clip(w, -1.0, 1.0))


@dataclass(frozen=True)
class Pose:
    """Rigid object-to-camera transform: ``x_cam = R(rotation) @ x_obj + translation``."""

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # meters

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.rotation.shape != (4,):
            raise ValueError("rotation must be a length-4 quaternion (w, x, y, z)")
        if self.translation.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must be unit norm")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "Pose":
        """Build from the 7-vector ``[tx, ty, tz, qw, qx, qy, qz]`` (q renormalized)."""
        vec = np.asarray(vec, dtype=np.float64)
        return cls(quat_normalize(vec[3:7]), vec[0:3].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation])

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to a (3,) point or (N, 3) array of points."""
        R = self.matrix()
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return R @ pts + self.translation
        return pts @ R.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        q = quat_normalize(quat_multiply(self.rotation, other.rotation))
        t = self.transform(other.translation)
        return Pose(q, t)

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.rotation)
        return Pose(qc, -(quat_to_matrix(qc) @ self.translation))


def transform_to_camera(pose: Pose, point_obj: np.ndarray) -> np.ndarray:
    """Object-frame point(s) into the camera frame: ``R @ x + t``."""
    return pose.transform(point_obj)


def extrapolate_pose(prev: Pose, curr: Pose) -> Pose:
    """Constant-velocity pose prediction.

    Translation replays the last linear step, the quaternion replays the
    last relative rotation: ``t⁺ = t_curr + (t_curr − t_prev)`` and
    ``q⁺ = q_curr ⊗ (q_curr ⊗ conj(q_prev))``, renormalized.
    """
    t = 2.0 * curr.translation - prev.translation
    q = quat_multiply(curr.rotation, quat_multiply(curr.rotation, quat_conjugate(prev.rotation)))
    return Pose(quat_normalize(q), t)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths / principal point in pixels, clip planes in meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")


def project_point(intr: CameraIntrinsics, x_c: np.ndarray) -> np.ndarray:
    """Perspective projection of a camera-frame point to pixels.

    Raises ``ValueError`` if the point is at or behind the near plane;
    callers must cull before projecting.
    """
    x, y, z = x_c
    if z <= intr.near:
        raise ValueError(f"point depth {z} not in front of near plane {intr.near}")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def projection_jacobian(intr: CameraIntrinsics, x_c: np.ndarray) -> np.ndarray:
    """2×3 Jacobian of :func:`project_point` at a camera-frame point.

    ``[[fx/z, 0, -fx·x/z²], [0, fy/z, -fy·y/z²]]`` — the local affine
    approximation under which a 3D Gaussian projects to a 2D Gaussian.
    """
    x, y, z = x_c
    if z <= intr.near:
        raise ValueError(f"point depth {z} not in front of near plane {intr.near}")
    z2 = z * z
    return np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / z2],
            [0.0, intr.fy / z, -intr.fy * y / z2],
        ]
    )


def deproject_pixel(intr: CameraIntrinsics, u: float, v: float, depth: float) -> np.ndarray:
    """Back-project pixel ``(u, v)`` at metric ``depth`` into the camera frame."""
    return np.array(
        [(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth]
    )


def deproject_depth_image(
    intr: CameraIntrinsics, depth: np.ndarray, mask: np.ndarray | None = None
) -> np.ndarray:
    """Back-project all valid (depth > 0, optionally masked) pixels -> (M, 3)."""
    valid = depth > 0
    if mask is not None:
        valid = valid & mask.astype(bool)
    vs, us = np.nonzero(valid)
    d = depth[vs, us]
    return np.stack(
        [(us - intr.cx) / intr.fx * d, (vs - intr.cy) / intr.fy * d, d], axis=1
    )


def quat_rotation_jacobians(q: np.ndarray) -> np.ndarray:
    """(4, 3, 3) array of ∂R/∂q_k of :func:`quat_to_matrix` at q (raw formula)."""
    w, x, y, z = q
    dRw = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    dRx = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]], dtype=np.float64)
    dRy = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]], dtype=np.float64)
    dRz = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]], dtype=np.float64)
    return np.stack([dRw, dRx, dRy, dRz])
