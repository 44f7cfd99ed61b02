"""Pinhole cameras, projection, and per-view joint depth tables."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BehindCameraError(ValueError):
    """Some points have camera-frame depth <= 1e-6 m."""

    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        super().__init__(f"points behind or on the camera plane at indices {self.indices}")


MIN_DEPTH = 1e-6


@dataclass(frozen=True, eq=False)
class CameraParams:
    """World-to-camera extrinsics plus pinhole intrinsics (OpenCV axes: x right, y down, z forward)."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: np.ndarray
    principal: np.ndarray
    image_size: tuple[int, int] = (512, 512)

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        f = np.array(self.focal, dtype=np.float64).reshape(2)
        c = np.array(self.principal, dtype=np.float64).reshape(2)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if np.any(f <= 0):
            raise ValueError(f"focal lengths must be positive, got {f}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(c))):
            raise ValueError("camera translation/principal point must be finite")
        for name, arr in (("rotation", R), ("translation", t), ("focal", f), ("principal", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), focal=(500.0, 500.0),
                principal=(256.0, 256.0), image_size=(512, 512)) -> "CameraParams":
        position = np.asarray(position, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - position
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ position, focal, principal, image_size)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def equals(self, other: "CameraParams") -> bool:
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and np.array_equal(self.focal, other.focal)
                and np.array_equal(self.principal, other.principal)
                and self.image_size == other.image_size)


def project_points(camera: CameraParams, points) -> np.ndarray:
    """Pinhole projection of K world points to (K, 2) pixel coordinates."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    pc = camera.to_camera(pts)
    bad = np.flatnonzero(pc[:, 2] <= MIN_DEPTH)
    if bad.size:
        raise BehindCameraError(bad)
    return pc[:, :2] / pc[:, 2:3] * camera.focal + camera.principal


@dataclass(frozen=True, eq=False)
class JointDistanceTable:
    """Per-joint (u, v, depth) records and min/range-normalised depths."""

    records: np.ndarray
    normalized: np.ndarray


def normalize_distances(d) -> np.ndarray:
    """Subtract the minimum and divide by the range; all-equal input gives zeros."""
    d = np.asarray(d, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi - lo <= 0.0:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def joint_distance_table(camera: CameraParams, body_joints) -> JointDistanceTable:
    joints = np.asarray(body_joints, dtype=np.float64).reshape(-1, 3)
    uv = project_points(camera, joints)
    depth = camera.to_camera(joints)[:, 2]
    return JointDistanceTable(np.column_stack([uv, depth]), normalize_distances(depth))


def camera_condition_vector(camera: CameraParams) -> np.ndarray:
    """First two rotation columns (6D rotation encoding) followed by the translation."""
    R = camera.rotation
    return np.concatenate([R[:, 0], R[:, 1], camera.translation])
