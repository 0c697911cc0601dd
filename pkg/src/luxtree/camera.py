"""Cameras, cone generation, and RGB-D backprojection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoValidPixels, SizeMismatch
from .octree import PointCloud


@dataclass
class Intrinsics:
    """Pinhole intrinsics; pixel (u,v) has its center at (u+0.5, v+0.5)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass
class CameraPose:
    """Camera-to-world rigid transform: x_world = R @ x_cam + t."""

    rotation: np.ndarray     # (3,3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-6) or np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be orthonormal with det +1")

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "CameraPose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return CameraPose(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class Cone:
    """Apex, unit axis, half-angle in [0, pi/4)."""

    apex: np.ndarray
    axis: np.ndarray
    half_angle: float


@dataclass
class ConeGrid:
    """Structure-of-arrays cone bundle, optionally carrying an image shape."""

    apexes: np.ndarray     # (N,3)
    axes: np.ndarray       # (N,3) unit vectors
    half_angle: float
    image_shape: tuple[int, int] | None = None  # (height, width)

    def __len__(self) -> int:
        return self.axes.shape[0]

    def __getitem__(self, i: int) -> Cone:
        return Cone(self.apexes[i], self.axes[i], self.half_angle)

    def subset(self, idx: np.ndarray) -> "ConeGrid":
        return ConeGrid(self.apexes[idx], self.axes[idx], self.half_angle, None)


def backproject(depth: np.ndarray, rgb: np.ndarray, intr: Intrinsics) -> PointCloud:
    """Lift an RGB-D image into a camera-frame point cloud.

    Pixels with non-finite or non-positive depth are dropped. Camera frame
    is +x right, +y down, +z forward; depth is the z coordinate.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise SizeMismatch(f"depth {depth.shape} vs intrinsics {(intr.height, intr.width)}")
    if rgb.shape != (intr.height, intr.width, 3):
        raise SizeMismatch(f"rgb {rgb.shape} vs intrinsics {(intr.height, intr.width, 3)}")
    valid = np.isfinite(depth) & (depth > 0)
    if not np.any(valid):
        raise NoValidPixels("no pixel has finite positive depth")
    v, u = np.nonzero(valid)
    z = depth[v, u]
    x = (u + 0.5 - intr.cx) / intr.fx * z
    y = (v + 0.5 - intr.cy) / intr.fy * z
    return PointCloud(np.column_stack([x, y, z]), rgb[v, u])


def panorama_dirs(width: int, height: int) -> np.ndarray:
    """Unit direction for each equirectangular pixel center, y-up.

    phi = 2*pi*(u+0.5)/W - pi sweeps azimuth, theta = pi*(v+0.5)/H comes
    down from the +y pole; dir = (sin t sin p, cos t, sin t cos p).
    Returns (H, W, 3).
    """
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    phi = 2.0 * np.pi * u - np.pi
    theta = np.pi * v
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    d = np.empty((height, width, 3), dtype=np.float64)
    d[:, :, 0] = st[:, None] * sp[None, :]
    d[:, :, 1] = np.broadcast_to(ct[:, None], (height, width))
    d[:, :, 2] = st[:, None] * cp[None, :]
    return d


def panorama_cones(
    width: int,
    height: int,
    pose: CameraPose | None = None,
    half_angle: float | None = None,
) -> ConeGrid:
    """One cone per equirectangular pixel, apex at the camera center.

    The default half-angle pi/(2H) is half the vertical pixel pitch.
    """
    pose = pose or CameraPose.identity()
    dirs = panorama_dirs(width, height).reshape(-1, 3)
    dirs = dirs @ pose.rotation.T
    apexes = np.broadcast_to(pose.translation, dirs.shape).copy()
    theta = half_angle if half_angle is not None else math.pi / (2.0 * height)
    return ConeGrid(apexes, dirs, theta, (height, width))


def perspective_cones(
    intr: Intrinsics,
    pose: CameraPose | None = None,
    half_angle: float | None = None,
) -> ConeGrid:
    """One cone per pinhole pixel. Default half-angle covers half a pixel
    at the image center: atan(0.5 / fy)."""
    pose = pose or CameraPose.identity()
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    d = np.stack(
        [
            (u + 0.5 - intr.cx) / intr.fx,
            (v + 0.5 - intr.cy) / intr.fy,
            np.ones_like(u, dtype=np.float64),
        ],
        axis=-1,
    ).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = d @ pose.rotation.T
    apexes = np.broadcast_to(pose.translation, d.shape).copy()
    theta = half_angle if half_angle is not None else math.atan(0.5 / intr.fy)
    return ConeGrid(apexes, d, theta, (intr.height, intr.width))
