"""Non-neural evaluation metrics: Chamfer distance, PSNR, mask IoU."""

import logging

import numpy as np

from errors import InvalidArgumentError
from image_io import RasterImage
from mesh import TriMesh, sample_surface
from octree import brute_force_closest, build_octree, closest_points

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
DEFAULT_CHAMFER_SAMPLES = 20000


def _one_way(src: TriMesh, dst: TriMesh, samples: int, seed: int, threads: int, brute_force: bool) -> float:
    points, _ = sample_surface(src, samples, seed)
    if brute_force:
        dist = brute_force_closest(dst, points)
    else:
        dist, _, _ = closest_points(build_octree(dst), dst, points, threads=threads)
    return float(np.mean(dist))


def chamfer_distance(a: TriMesh, b: TriMesh, samples: int = DEFAULT_CHAMFER_SAMPLES, seed: int = 0,
                     threads: int = 1, brute_force: bool = False) -> float:
    """Symmetric mean nearest-surface distance over area-weighted samples of both meshes."""
    if a.is_empty or b.is_empty:
        raise InvalidArgumentError("Chamfer distance needs two non-empty meshes")
    if samples < 1:
        raise InvalidArgumentError(f"samples must be >= 1, got {samples}")
    ab = _one_way(a, b, samples, seed, threads, brute_force)
    ba = _one_way(b, a, samples, seed, threads, brute_force)
    return 0.5 * (ab + ba)


def _data(image) -> np.ndarray:
    data = image.data if isinstance(image, RasterImage) else np.asarray(image, dtype=np.float64)
    return data if data.ndim == 3 else data[..., None]


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over masked pixels; identical images report the 99 dB cap."""
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"PSNR needs equal shapes, got {x.shape} and {y.shape}")
    region = np.ones(x.shape[:2], dtype=bool) if mask is None else _data(mask)[:, :, 0] > 0.5
    if region.shape != x.shape[:2]:
        raise InvalidArgumentError(f"Mask shape {region.shape} does not match image {x.shape[:2]}")
    if not region.any():
        raise InvalidArgumentError("PSNR mask is empty")
    mse = float(np.mean((x[region] - y[region]) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def mask_iou(a, b) -> float:
    ma, mb = _data(a)[:, :, 0] > 0.5, _data(b)[:, :, 0] > 0.5
    if ma.shape != mb.shape:
        raise InvalidArgumentError(f"Mask IoU needs equal shapes, got {ma.shape} and {mb.shape}")
    union = int((ma | mb).sum())
    return 1.0 if union == 0 else float((ma & mb).sum()) / union
