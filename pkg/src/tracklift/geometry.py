"""Camera models, rigid poses, and pinhole projection.

Conventions used everywhere in this package:

Camera frame (standard computer vision):
  - x right, y down, z forward (camera looks along +z)
  - a point is visible only if its camera-frame z is positive (cheirality)

Image frame:
  - u right, v down, origin at the top-left corner, units are pixels
  - u = fx * x / z + cx,  v = fy * y / z + cy

Poses are stored camera-to-world: world = R @ cam + t, with R given as a
unit quaternion in Hamilton convention (stored w-first internally; the
pose file format carries it w-last). The camera center in world
coordinates is therefore t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CheiralityViolation(Exception):
    """Raised when a point to be projected lies behind the camera."""


_MIN_DEPTH = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PinholeIntrinsics:
    camera_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )


def quat_normalize(q: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Validate and renormalize a (w, x, y, z) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > tol:
        raise ValueError(f"quaternion norm {n} deviates from 1 by more than {tol}")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit (w, x, y, z) quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    q = np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )
    return q / np.linalg.norm(q)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform at one (frame, camera)."""

    rotation: np.ndarray  # unit quaternion, (w, x, y, z)
    translation: np.ndarray  # camera center in world coordinates, meters
    frame_index: int
    camera_id: str

    def __post_init__(self):
        object.__setattr__(self, "rotation", _readonly(quat_normalize(self.rotation)))
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", _readonly(t))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def inverse(self) -> "Pose":
        q_inv = quat_conjugate(self.rotation)
        t_inv = -quat_to_matrix(q_inv) @ self.translation
        return Pose(q_inv, t_inv, self.frame_index, self.camera_id)


@dataclass(frozen=True)
class WorldPoint:
    position: np.ndarray  # world frame, meters
    track_id: int

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64)
        if p.shape != (3,):
            raise ValueError(f"position must be a 3-vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError(f"non-finite coordinates for track {self.track_id}")
        object.__setattr__(self, "position", _readonly(p))


@dataclass(frozen=True)
class BBox2D:
    left: float
    top: float
    width_px: float
    height_px: float
    score: float
    frame_index: int
    camera_id: str
    object_id: int | None = None

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError(f"box size must be positive, got {self.width_px}x{self.height_px}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def right(self) -> float:
        return self.left + self.width_px

    @property
    def bottom(self) -> float:
        return self.top + self.height_px

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + 0.5 * self.width_px, self.top + 0.5 * self.height_px)

    def contains(self, u: float, v: float) -> bool:
        return self.left <= u <= self.right and self.top <= v <= self.bottom


def world_to_camera(point: np.ndarray, pose: Pose) -> np.ndarray:
    """Map a world point into the camera frame: R^T (p - t)."""
    p = np.asarray(point, dtype=np.float64)
    return pose.rotation_matrix().T @ (p - pose.translation)


def camera_to_world(point: np.ndarray, pose: Pose) -> np.ndarray:
    """Inverse of world_to_camera: R p + t."""
    p = np.asarray(point, dtype=np.float64)
    return pose.rotation_matrix() @ p + pose.translation


def project(
    point: np.ndarray, pose: Pose, intrinsics: PinholeIntrinsics
) -> tuple[float, float, float]:
    """Project a world point; returns (u, v, depth) in pixels and meters.

    Raises CheiralityViolation when the point is at or behind the camera
    plane (camera-frame z <= 1e-9).
    """
    pc = world_to_camera(point, pose)
    z = float(pc[2])
    if z <= _MIN_DEPTH:
        raise CheiralityViolation(
            f"point depth {z} behind camera {pose.camera_id} at frame {pose.frame_index}"
        )
    u = intrinsics.fx * pc[0] / z + intrinsics.cx
    v = intrinsics.fy * pc[1] / z + intrinsics.cy
    return float(u), float(v), z


def point_in_bbox(
    point: np.ndarray, pose: Pose, intrinsics: PinholeIntrinsics, box: BBox2D
) -> bool:
    """True iff the point projects with positive depth inside the box."""
    try:
        u, v, _ = project(point, pose, intrinsics)
    except CheiralityViolation:
        return False
    return box.contains(u, v)
