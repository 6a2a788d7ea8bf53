"""
Facial landmarks and their alignment to the sculpted mesh.

Alignment casts a ray from the camera through each alignment keypoint, takes
the first mesh hit as the target position, fits the least-squares similarity
transform from source to target keypoints and applies it to every landmark.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from camera import Camera
from errors import AlignmentFailureError, DegenerateConfigurationError, InvalidArgumentError
from mesh import TriMesh
from octree import Octree, build_octree, ray_intersect

logger = logging.getLogger(__name__)

DEFAULT_KEYPOINT_COUNT = 7
_RANK_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray      # (K, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgumentError(f"Landmarks must be (K, 3), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("Landmarks contain non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "LandmarkSet":
        indices = list(indices)
        if any(i < 0 or i >= len(self) for i in indices):
            raise InvalidArgumentError(f"Keypoint indices {indices} out of range for {len(self)} landmarks")
        return LandmarkSet(self.points[indices])


@dataclass(frozen=True, eq=False)
class SimTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    residual: float = field(default=0.0)

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        if not self.scale > 0.0:
            raise InvalidArgumentError(f"Similarity scale must be positive, got {self.scale}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0.0:
            raise InvalidArgumentError("Rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "SimTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m


def _check_spread(centered: np.ndarray, label: str) -> None:
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= _RANK_TOLERANCE or sv[1] <= _RANK_TOLERANCE * sv[0]:
        raise DegenerateConfigurationError(f"{label} keypoints are coincident or collinear")


def estimate_similarity_transform(src: LandmarkSet, dst: LandmarkSet) -> SimTransform:
    """Least-squares s, R, t with dst ~ s R src + t; residual is the RMS point error."""
    x, y = src.points, dst.points
    if len(x) != len(y):
        raise InvalidArgumentError(f"Point counts differ: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise InvalidArgumentError(f"Need at least 3 point pairs, got {len(x)}")

    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mu_x, y - mu_y
    _check_spread(xc, "Source")
    _check_spread(yc, "Target")

    cov = yc.T @ xc / len(x)
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[-1] = -1.0
    rotation = u @ np.diag(s) @ vt
    var_x = np.sum(xc * xc) / len(x)
    scale = float(np.sum(d * s) / var_x)
    translation = mu_y - scale * rotation @ mu_x

    diff = scale * x @ rotation.T + translation - y
    residual = float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
    return SimTransform(scale, rotation, translation, residual)


def align_landmarks_to_mesh(landmarks: LandmarkSet, keypoint_indices, camera: Camera, mesh: TriMesh,
                            octree: Octree | None = None) -> LandmarkSet:
    if mesh.is_empty:
        raise InvalidArgumentError("Cannot align landmarks to an empty mesh")
    octree = octree if octree is not None else build_octree(mesh)
    source = landmarks.subset(keypoint_indices)
    origin = camera.position

    targets = []
    for index, point in zip(keypoint_indices, source.points):
        direction = point - origin
        length = np.linalg.norm(direction)
        if length == 0.0:
            raise AlignmentFailureError(index, f"Keypoint {index} coincides with the camera position")
        hit = ray_intersect(octree, mesh, origin, direction / length)
        if hit is None:
            raise AlignmentFailureError(index)
        targets.append(hit.point)

    transform = estimate_similarity_transform(source, LandmarkSet(np.array(targets)))
    logger.info(f"Landmark alignment: scale {transform.scale:.4f}, residual {transform.residual:.3e}")
    return LandmarkSet(transform.apply(landmarks.points))


def load_landmarks(path: Path) -> LandmarkSet:
    """Whitespace-separated `x y z` rows; `#` starts a comment."""
    return LandmarkSet(np.loadtxt(Path(path), dtype=np.float64, comments="#", ndmin=2))


def save_landmarks(path: Path, landmarks: LandmarkSet) -> None:
    np.savetxt(Path(path), landmarks.points, fmt="%.9f", header="x y z")
