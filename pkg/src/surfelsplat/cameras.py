"""Pinhole camera model and ray generation.

Convention: camera space is OpenCV-style, +z forward, +x right, +y down.
`pose` is the 4x4 world-from-camera rigid transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {self.pose.shape}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be < far")

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        """World-from-camera rotation."""
        return self.pose[:3, :3]

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        """Transform world points (..., 3) into camera space."""
        return (pts - self.pose[:3, 3]) @ self.pose[:3, :3]

    def ray_dirs(self) -> np.ndarray:
        """Unit world-space ray directions through all pixel centers, (H*W, 3).

        Row-major pixel order: index = v * width + u.
        """
        u = (np.arange(self.width, dtype=np.float64) + 0.5 - self.cx) / self.fx
        v = (np.arange(self.height, dtype=np.float64) + 0.5 - self.cy) / self.fy
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        d_world = d_cam @ self.pose[:3, :3].T
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        return d_world

    def pixel_ray(self, u: int, v: int) -> np.ndarray:
        """Unit world-space direction through pixel center (u, v)."""
        d_cam = np.array(
            [(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy, 1.0]
        )
        d = self.pose[:3, :3] @ d_cam
        return d / np.linalg.norm(d)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose with the camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose
