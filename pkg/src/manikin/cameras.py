"""Camera model: orbit poses, pinhole rays, and camera/world conversions.

Conventions: world up is +y, azimuth 0 puts the camera on the +z axis looking at
`look_at`, azimuth grows toward +x, elevation is degrees above the horizontal
plane. Camera space is right-handed OpenGL style: +x right, +y up, +z toward
the viewer (camera-to-world rotation columns are [right, up, backward]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ArgumentError


def wrap_azimuth(deg: float) -> float:
    """Wrap an angle in degrees into [-180, 180)."""
    return (deg + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class CameraPose:
    """Orbit camera: position derived from (distance, elevation, azimuth) around look_at."""

    distance: float
    elevation: float
    azimuth: float
    fov: float = 22.5
    look_at: tuple = (0.0, 0.0, 0.0)
    image_size: int = 64

    def __post_init__(self):
        if not (0.0 < self.fov < 90.0):
            raise ArgumentError(f"fov must be in (0, 90) degrees, got {self.fov}")
        if self.distance <= 0:
            raise ArgumentError(f"distance must be > 0, got {self.distance}")
        if self.image_size < 8:
            raise ArgumentError(f"image_size must be >= 8, got {self.image_size}")
        object.__setattr__(self, "azimuth", wrap_azimuth(float(self.azimuth)))
        object.__setattr__(self, "look_at", tuple(float(x) for x in self.look_at))

    @property
    def position(self) -> np.ndarray:
        el = math.radians(self.elevation)
        az = math.radians(self.azimuth)
        offset = np.array(
            [
                math.cos(el) * math.sin(az),
                math.sin(el),
                math.cos(el) * math.cos(az),
            ],
            dtype=np.float64,
        )
        return np.asarray(self.look_at, dtype=np.float64) + self.distance * offset

    def to_matrix(self) -> np.ndarray:
        """4x4 camera-to-world transform (float64)."""
        pos = self.position
        target = np.asarray(self.look_at, dtype=np.float64)
        backward = pos - target
        backward /= np.linalg.norm(backward)
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(world_up, backward)
        nr = np.linalg.norm(right)
        if nr < 1e-12:  # looking straight up/down; pick a stable right axis
            right = np.array([math.cos(math.radians(self.azimuth)), 0.0, -math.sin(math.radians(self.azimuth))])
        else:
            right /= nr
        up = np.cross(backward, right)
        mat = np.eye(4, dtype=np.float64)
        mat[:3, 0] = right
        mat[:3, 1] = up
        mat[:3, 2] = backward
        mat[:3, 3] = pos
        return mat

    def relative_to(self, reference: "CameraPose") -> tuple:
        """(d_elevation, d_azimuth, d_distance) of self w.r.t. a reference pose."""
        return (
            self.elevation - reference.elevation,
            wrap_azimuth(self.azimuth - reference.azimuth),
            self.distance - reference.distance,
        )


def pose_from_matrix(matrix: np.ndarray, look_at, fov: float, image_size: int) -> CameraPose:
    """Invert `to_matrix` given the known look_at point."""
    mat = np.asarray(matrix, dtype=np.float64)
    pos = mat[:3, 3]
    target = np.asarray(look_at, dtype=np.float64)
    offset = pos - target
    distance = float(np.linalg.norm(offset))
    if distance <= 0:
        raise ArgumentError("camera position coincides with look_at")
    elevation = math.degrees(math.asin(np.clip(offset[1] / distance, -1.0, 1.0)))
    azimuth = math.degrees(math.atan2(offset[0], offset[2]))
    return CameraPose(distance, elevation, azimuth, fov, tuple(target), image_size)


def generate_rays(camera: CameraPose, pixel_idx=None, dtype=torch.float32):
    """Ray origins and unit directions through pixel centers.

    Returns (origins, directions) of shape (N,3); N = image_size**2 unless
    `pixel_idx` selects a subset (flat row-major indices).
    """
    n = camera.image_size
    mat = camera.to_matrix()
    right = torch.as_tensor(mat[:3, 0], dtype=dtype)
    up = torch.as_tensor(mat[:3, 1], dtype=dtype)
    forward = torch.as_tensor(-mat[:3, 2], dtype=dtype)
    origin = torch.as_tensor(mat[:3, 3], dtype=dtype)

    if pixel_idx is None:
        ii = torch.arange(n * n)
    else:
        ii = torch.as_tensor(pixel_idx, dtype=torch.long)
    px = (ii % n).to(dtype)
    py = torch.div(ii, n, rounding_mode="floor").to(dtype)
    half = math.tan(math.radians(camera.fov) / 2.0)
    x = (2.0 * (px + 0.5) / n - 1.0) * half
    y = (1.0 - 2.0 * (py + 0.5) / n) * half
    dirs = x[:, None] * right + y[:, None] * up + forward
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = origin.expand_as(dirs)
    return origins, dirs


def world_to_camera_normals(normals: torch.Tensor, camera: CameraPose) -> torch.Tensor:
    """Rotate world-space normals into camera space (front-facing -> +z)."""
    mat = camera.to_matrix()
    rot = torch.as_tensor(mat[:3, :3], dtype=normals.dtype)  # columns right/up/backward
    return normals @ rot


def world_to_camera_points(points: torch.Tensor, camera: CameraPose) -> torch.Tensor:
    mat = camera.to_matrix()
    rot = torch.as_tensor(mat[:3, :3], dtype=points.dtype)
    pos = torch.as_tensor(mat[:3, 3], dtype=points.dtype)
    return (points - pos) @ rot


def project_points(points_cam: torch.Tensor, camera: CameraPose) -> torch.Tensor:
    """Camera-space points -> continuous pixel coordinates (x, y).

    Points in front of the camera have z < 0; callers must cull others.
    """
    half = math.tan(math.radians(camera.fov) / 2.0)
    n = camera.image_size
    z = points_cam[:, 2]
    x_ndc = points_cam[:, 0] / (-z) / half
    y_ndc = points_cam[:, 1] / (-z) / half
    px = (x_ndc + 1.0) * (n / 2.0) - 0.5
    py = (1.0 - y_ndc) * (n / 2.0) - 0.5
    return torch.stack([px, py], dim=-1)
