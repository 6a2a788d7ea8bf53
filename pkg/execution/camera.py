"""
Orbit camera around a head-centred frame.

Right-handed world, y up, the head front faces +z. A camera at azimuth 0 and
elevation 0 sits on +z looking back at `look_at`; azimuth rotates about +y.
Camera space follows the OpenGL convention (x right, y up, looking down -z).
Screen space has its origin at the top-left corner, pixel (i, j) covers
[j, j+1) x [i, i+1) and its centre is at (j + 0.5, i + 0.5).
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

WORLD_UP = np.array([0.0, 1.0, 0.0])
DEFAULT_NEAR = 0.01
DEFAULT_FAR = 100.0


@dataclass(frozen=True)
class Camera:
    azimuth: float = 0.0        # degrees
    elevation: float = 0.0      # degrees
    distance: float = 3.0
    fovy: float = 40.0          # degrees
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 512
    height: int = 512

    def __post_init__(self):
        if not 0.0 < self.fovy < 180.0:
            raise InvalidArgumentError(f"fovy must be in (0, 180) degrees, got {self.fovy}")
        if not self.distance > 0.0:
            raise InvalidArgumentError(f"Camera distance must be positive, got {self.distance}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError(f"Image size must be positive, got {self.width}x{self.height}")
        object.__setattr__(self, "look_at", tuple(float(v) for v in self.look_at))

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def position(self) -> np.ndarray:
        az, el = np.radians(self.azimuth), np.radians(self.elevation)
        offset = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        return np.asarray(self.look_at) + self.distance * offset

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors in world space."""
        forward = np.asarray(self.look_at) - self.position
        forward = forward / np.linalg.norm(forward)
        up_hint = WORLD_UP
        if abs(forward @ WORLD_UP) > 1.0 - 1e-9:
            # straight up/down: keep the head front at the bottom of the image
            up_hint = np.array([0.0, 0.0, -1.0]) if forward[1] < 0 else np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up_hint)
        right = right / np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward

    @property
    def focal_px(self) -> float:
        """Focal length in pixels (square pixels, vertical field of view)."""
        return 0.5 * self.height / np.tan(0.5 * np.radians(self.fovy))

    def view_matrix(self) -> np.ndarray:
        """World -> camera 4x4 matrix."""
        right, up, forward = self.basis()
        rot = np.stack([right, up, -forward])
        view = np.eye(4)
        view[:3, :3] = rot
        view[:3, 3] = -rot @ self.position
        return view

    def projection_matrix(self, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> np.ndarray:
        f = 1.0 / np.tan(0.5 * np.radians(self.fovy))
        aspect = self.width / self.height
        proj = np.zeros((4, 4))
        proj[0, 0] = f / aspect
        proj[1, 1] = f
        proj[2, 2] = (far + near) / (near - far)
        proj[2, 3] = 2.0 * far * near / (near - far)
        proj[3, 2] = -1.0
        return proj

    def with_size(self, width: int, height: int) -> "Camera":
        return replace(self, width=width, height=height)


def camera_from_spherical(azimuth: float, elevation: float, distance: float, fovy: float,
                          look_at=(0.0, 0.0, 0.0), size=(512, 512)) -> Camera:
    width, height = size
    return Camera(float(azimuth), float(elevation), float(distance), float(fovy),
                  tuple(look_at), int(width), int(height))


@dataclass(frozen=True)
class CameraRanges:
    """Sampling ranges, each [min, max]; angles in degrees."""
    elevation: tuple = (-20.0, 45.0)
    azimuth: tuple = (-180.0, 180.0)
    fovy: tuple = (30.0, 45.0)
    distance: tuple = (2.5, 4.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    size: tuple = (512, 512)

    def __post_init__(self):
        for name in ("elevation", "azimuth", "fovy", "distance"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidArgumentError(f"Camera range '{name}' has min {lo} > max {hi}")
        if self.fovy[0] <= 0.0 or self.fovy[1] >= 180.0:
            raise InvalidArgumentError(f"fovy range {self.fovy} must lie inside (0, 180)")
        if self.distance[0] <= 0.0:
            raise InvalidArgumentError(f"distance range {self.distance} must be positive")


def sample_camera(ranges: CameraRanges, rng: np.random.Generator) -> Camera:
    """One uniform draw per component in the order azimuth, elevation, fovy, distance."""
    azimuth = rng.uniform(*ranges.azimuth)
    elevation = rng.uniform(*ranges.elevation)
    fovy = rng.uniform(*ranges.fovy)
    distance = rng.uniform(*ranges.distance)
    return camera_from_spherical(azimuth, elevation, distance, fovy, ranges.look_at, ranges.size)


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin (3,) and unit directions (H, W, 3) through every pixel centre."""
    right, up, forward = camera.basis()
    f = camera.focal_px
    cols = (np.arange(camera.width) + 0.5 - 0.5 * camera.width) / f
    rows = -(np.arange(camera.height) + 0.5 - 0.5 * camera.height) / f
    xc, yc = np.meshgrid(cols, rows)
    dirs = forward + xc[..., None] * right + yc[..., None] * up
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return camera.position, dirs


@dataclass(frozen=True, eq=False)
class Projection:
    xy: np.ndarray          # (N, 2) screen coordinates in pixels (x right, y down)
    depth: np.ndarray       # (N,) eye depth along the view axis
    jacobian: np.ndarray    # (N, 2, 3) d(xy)/d(point)
    in_front: np.ndarray = field(default=None)   # (N,) depth > near plane


def project_points(camera: Camera, points: np.ndarray, near: float = DEFAULT_NEAR) -> Projection:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    right, up, forward = camera.basis()
    q = points - camera.position
    xc, yc, depth = q @ right, q @ up, q @ forward
    in_front = depth > near
    safe = np.where(in_front, depth, 1.0)
    f = camera.focal_px
    sx = 0.5 * camera.width + f * xc / safe
    sy = 0.5 * camera.height - f * yc / safe

    inv = 1.0 / safe
    jx = f * (right[None, :] * inv[:, None] - (xc * inv * inv)[:, None] * forward[None, :])
    jy = -f * (up[None, :] * inv[:, None] - (yc * inv * inv)[:, None] * forward[None, :])
    return Projection(np.stack([sx, sy], axis=1), depth, np.stack([jx, jy], axis=1), in_front)
