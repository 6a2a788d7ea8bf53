"""
Conditioning signals handed to guidance providers.

The ConditionBundle carries the opaque text tag and identity vector plus the
per-view images: projected landmark image, rendered normal map, Canny map
of the reference portrait and optional depth. Identity vectors are stored
as "FID0" files (magic + u32 length + float32 LE payload).
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from camera import Camera
from errors import InvalidArgumentError
from image_io import RasterImage
from mesh import TriMesh
from rasterizer import normal_to_color, project_landmarks, rasterize, shade_normal

logger = logging.getLogger(__name__)

CANNY_SIGMA = 1.4
DEFAULT_CANNY_LOW = 0.05
DEFAULT_CANNY_HIGH = 0.1
DEFAULT_IDENTITY_DIM = 512
FID_MAGIC = b"FID0"
_LUMA = np.array([0.2126, 0.7152, 0.0722])


def _luma(image: RasterImage) -> np.ndarray:
    if image.channels == 1:
        return image.plane
    if image.channels >= 3:
        return image.data[:, :, :3] @ _LUMA
    raise InvalidArgumentError(f"Canny needs a 1- or 3-channel image, got {image.channels}")


def canny(image: RasterImage, low: float = DEFAULT_CANNY_LOW, high: float = DEFAULT_CANNY_HIGH,
          sigma: float = CANNY_SIGMA) -> RasterImage:
    """Binary edge map: Gaussian blur, Sobel, non-maximum suppression, hysteresis.

    Thresholds apply to the Sobel magnitude scaled by 1/8, i.e. roughly the
    intensity change per pixel.
    """
    if not 0.0 <= low <= high:
        raise InvalidArgumentError(f"Canny thresholds need 0 <= low <= high, got {low}, {high}")
    gray = ndimage.gaussian_filter(_luma(image), sigma, mode="nearest")
    gx = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    mag = np.hypot(gx, gy)

    # quantize the gradient direction to 0, 45, 90, 135 degrees
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    sector = (np.floor((angle + 22.5) / 45.0).astype(np.int64)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}      # (drow, dcol) along the gradient

    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dr, dc) in offsets.items():
        ahead = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        behind = padded[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        # strict on one side so a two-pixel plateau keeps exactly one pixel
        keep |= (sector == s) & (mag > behind) & (mag >= ahead)
    thin = np.where(keep, mag, 0.0)

    weak = thin >= max(low, 1e-12)
    strong = thin >= max(high, 1e-12)
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    if count == 0:
        return RasterImage(np.zeros_like(mag))
    has_strong = np.zeros(count + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return RasterImage(has_strong[labels].astype(np.float64))


@dataclass(frozen=True, eq=False)
class ConditionBundle:
    text_tag: str
    identity: np.ndarray
    landmark_image: RasterImage | None = None
    normal_image: RasterImage | None = None
    canny_image: RasterImage | None = None
    depth_image: RasterImage | None = None
    camera: Camera | None = None
    render_mode: str = "normal"           # which kind of image x0 is: "normal" or "rgb"
    landmarks_missing: bool = False

    def __post_init__(self):
        identity = np.asarray(self.identity, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(identity)):
            raise InvalidArgumentError("Identity vector contains non-finite values")
        object.__setattr__(self, "identity", identity)
        if self.render_mode not in ("normal", "rgb"):
            raise InvalidArgumentError(f"Unknown render mode '{self.render_mode}'")

    @property
    def identity_dim(self) -> int:
        return len(self.identity)

    def for_view(self, camera: Camera, **images) -> "ConditionBundle":
        return replace(self, camera=camera, **images)

    def without_identity_conditions(self) -> "ConditionBundle":
        """Text-only bundle (plain score distillation)."""
        return replace(self, identity=np.zeros(0), landmark_image=None, landmarks_missing=True)


def _resize_to(image: RasterImage, width: int, height: int) -> RasterImage:
    if image.width == width and image.height == height:
        return image
    planes = [np.asarray(Image.fromarray(image.data[:, :, c].astype(np.float32), mode="F")
                         .resize((width, height), Image.BILINEAR), dtype=np.float64)
              for c in range(image.channels)]
    return RasterImage(np.stack(planes, axis=-1))


def build_condition_bundle(reference_image: RasterImage | None, identity_vector: np.ndarray,
                           landmarks, camera: Camera, mesh: TriMesh | None, text_tag: str,
                           render_mode: str = "normal", gbuffer=None) -> ConditionBundle:
    """Bundle for one view; the landmark image is occlusion-tested against `mesh` when given."""
    canny_image = None
    if reference_image is not None:
        canny_image = canny(_resize_to(reference_image, camera.width, camera.height))

    missing = landmarks is None or len(landmarks) == 0
    if missing:
        landmark_image = RasterImage.filled(camera.width, camera.height)
    else:
        if gbuffer is None and mesh is not None and not mesh.is_empty:
            gbuffer = rasterize(mesh, camera)
        landmark_image = project_landmarks(landmarks, camera, gbuffer)

    return ConditionBundle(text_tag=text_tag, identity=identity_vector, landmark_image=landmark_image,
                           canny_image=canny_image, camera=camera, render_mode=render_mode,
                           landmarks_missing=missing)


def view_bundle(base: ConditionBundle, gbuffer, landmarks=None, render_mode: str = "normal",
                identity_conditions: bool = True) -> ConditionBundle:
    """Per-view copy of `base`: landmark image occlusion-tested against the view's G-buffer plus its normal map."""
    camera = gbuffer.camera
    if landmarks is None or len(landmarks) == 0:
        landmark_image = RasterImage.filled(camera.width, camera.height)
    else:
        landmark_image = project_landmarks(landmarks, camera, gbuffer)
    canny_image = base.canny_image
    if canny_image is not None:
        canny_image = _resize_to(canny_image, camera.width, camera.height)
    bundle = base.for_view(camera, landmark_image=landmark_image, canny_image=canny_image,
                           normal_image=normal_to_color(shade_normal(gbuffer), gbuffer.mask),
                           render_mode=render_mode,
                           landmarks_missing=landmarks is None or len(landmarks) == 0)
    return bundle if identity_conditions else bundle.without_identity_conditions()


# --- identity vectors -------------------------------------------------------------

def write_identity_vector(path: Path, vector: np.ndarray) -> None:
    vec = np.asarray(vector, dtype="<f4").reshape(-1)
    Path(path).write_bytes(FID_MAGIC + struct.pack("<I", len(vec)) + vec.tobytes())


def read_identity_vector(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FID_MAGIC:
        raise InvalidArgumentError(f"{path} is not an identity vector file")
    (length,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 4 * length:
        raise InvalidArgumentError(f"{path}: header says {length} values, payload has {(len(data) - 8) // 4}")
    return np.frombuffer(data, dtype="<f4", count=length, offset=8).astype(np.float64)


def derive_identity_vector(image: RasterImage, dim: int = DEFAULT_IDENTITY_DIM, seed: int = 0) -> np.ndarray:
    """Unit vector seeded by a hash of the quantized pixels; a stand-in for a face encoder."""
    quantized = np.round(np.clip(image.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    digest = hashlib.sha256(quantized.tobytes() + struct.pack("<q", seed)).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)
