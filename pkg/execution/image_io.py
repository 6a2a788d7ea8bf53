"""
Raster images and their on-disk formats.

RasterImage holds float64 samples shaped (H, W, C): linear colour for RGB,
world units for depth. PNG files are 8-bit (sRGB-encoded for colour, linear
for masks) and go through Pillow; PFM files keep full float precision for
depth, normal and gradient dumps.
"""

import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RasterImage:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1 or data.shape[2] < 1:
            raise InvalidArgumentError(f"Image data must be (H, W, C) with positive sizes, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("Image contains non-finite samples")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """First channel as an (H, W) array."""
        return self.data[:, :, 0]

    @classmethod
    def filled(cls, width: int, height: int, channels: int = 1, value: float = 0.0) -> "RasterImage":
        return cls(np.full((height, width, channels), value, dtype=np.float64))


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(path: Path, image: RasterImage, srgb: bool = True) -> None:
    """8-bit PNG; `srgb=False` stores values as-is (masks, normal maps)."""
    data = image.data
    if image.channels not in (1, 3, 4):
        raise InvalidArgumentError(f"PNG needs 1, 3 or 4 channels, got {image.channels}")
    encoded = linear_to_srgb(data) if srgb else np.clip(data, 0.0, 1.0)
    pixels = np.round(encoded * 255.0).astype(np.uint8)
    mode = {1: "L", 3: "RGB", 4: "RGBA"}[image.channels]
    Image.fromarray(pixels[:, :, 0] if image.channels == 1 else pixels, mode=mode).save(Path(path))


def load_png(path: Path, srgb: bool = True, channels: int | None = None) -> RasterImage:
    img = Image.open(Path(path))
    if channels == 1:
        img = img.convert("L")
    elif channels == 3 or (channels is None and img.mode not in ("L", "RGB", "RGBA")):
        img = img.convert("RGB")
    data = np.asarray(img, dtype=np.float64) / 255.0
    return RasterImage(srgb_to_linear(data) if srgb else data)


def encode_pfm(image: RasterImage) -> bytes:
    """Little-endian PFM (scale -1), rows stored bottom to top."""
    if image.channels == 1:
        header = b"Pf"
    elif image.channels == 3:
        header = b"PF"
    else:
        raise InvalidArgumentError(f"PFM needs 1 or 3 channels, got {image.channels}")
    buf = io.BytesIO()
    buf.write(header + b"\n")
    buf.write(f"{image.width} {image.height}\n".encode("ascii"))
    buf.write(b"-1.0\n")
    samples = np.flipud(image.data).astype("<f4")
    buf.write(samples.tobytes())
    return buf.getvalue()


def decode_pfm(payload: bytes) -> RasterImage:
    stream = io.BytesIO(payload)
    header = stream.readline().strip()
    if header not in (b"PF", b"Pf"):
        raise InvalidArgumentError(f"Not a PFM payload (header {header!r})")
    channels = 3 if header == b"PF" else 1
    width, height = (int(v) for v in stream.readline().split())
    scale = float(stream.readline().strip())
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    samples = np.frombuffer(stream.read(4 * count), dtype=dtype, count=count)
    data = np.flipud(samples.reshape(height, width, channels)).astype(np.float64)
    return RasterImage(data)


def write_pfm(path: Path, image: RasterImage) -> None:
    Path(path).write_bytes(encode_pfm(image))


def read_pfm(path: Path) -> RasterImage:
    return decode_pfm(Path(path).read_bytes())


def save_image(path: Path, image: RasterImage, srgb: bool = True) -> None:
    """Dispatch on suffix: .pfm keeps floats, anything else goes through PNG."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, image)
    else:
        save_png(path, image, srgb=srgb)
    logger.debug(f"Saved {path}")


def load_image(path: Path, srgb: bool = True) -> RasterImage:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return load_png(path, srgb=srgb)
