"""
Functions to render heatmaps as colour images with a heatbar.

Images are written as binary PPM (P6, maxval 255) so rendered files are
byte-for-byte reproducible. Base images for overlays may be any format Pillow
can open.

    from hmpe.utils import plotting as pl

    img = pl.render_heatmap(heat, scale=6)
    pl.write_ppm("heat.ppm", img)
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from hmpe import logger
from hmpe.utils.errors import DomainError, FormatError, ShapeError
from hmpe.utils.numerics import ArrayLike, upsample_bilinear, upsample_nearest
from hmpe.utils.tensor_io import PathLike

Upsample = Literal["nearest", "bilinear"]

# blue -> cyan -> green -> yellow -> red at v = 0, 0.25, 0.5, 0.75, 1
COLOUR_KNOTS = np.array(
    [
        [0, 0, 255],
        [0, 255, 255],
        [0, 255, 0],
        [255, 255, 0],
        [255, 0, 0],
    ],
    dtype=np.float64,
)
HEATBAR_WIDTH = 16
DEFAULT_SCALE = 6
DEFAULT_ALPHA = 0.6


@dataclass(frozen=True)
class RasterImage:
    """RGB image, pixels of shape (height, width, 3) and dtype uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError("raster pixels (height, width, 3)", (-1, -1, 3), self.pixels.shape)
        if self.pixels.dtype != np.uint8:
            raise FormatError(f"raster pixels must be uint8, got {self.pixels.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def dims(self) -> Tuple[int, int]:
        return self.width, self.height

    @classmethod
    def from_tensor(cls, image: ArrayLike) -> "RasterImage":
        """Convert a (3, H, W) float image in [0, 1] to 8-bit RGB."""
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ShapeError("image tensor (3, H, W)", (3, -1, -1), arr.shape)
        return cls(_round_half_up(np.clip(arr, 0.0, 1.0).transpose(1, 2, 0) * 255.0))


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.uint8)


def _segments(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scaled = values * (len(COLOUR_KNOTS) - 1)
    segment = np.minimum(np.floor(scaled), len(COLOUR_KNOTS) - 2).astype(np.int64)
    return segment, scaled - segment


def ramp_position(values: ArrayLike) -> np.ndarray:
    """Segment number plus intra-segment position along the colour ramp."""
    segment, t = _segments(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0))
    return segment + t


def colormap_array(values: ArrayLike) -> np.ndarray:
    """Colour every value of an array; returns uint8 of shape values.shape + (3,)."""
    segment, t = _segments(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0))
    lo = COLOUR_KNOTS[segment]
    hi = COLOUR_KNOTS[segment + 1]
    return _round_half_up(lo + np.expand_dims(t, -1) * (hi - lo))


def colormap(v: float) -> Tuple[int, int, int]:
    """Piecewise-linear blue-to-red colour of one value, clamped to [0, 1]."""
    r, g, b = colormap_array(np.array([v], dtype=np.float64))[0]
    return int(r), int(g), int(b)


def heatbar(height: int, width: int = HEATBAR_WIDTH) -> np.ndarray:
    """Vertical ramp legend, red (1.0) at the top row and blue (0.0) at the bottom."""
    values = np.linspace(1.0, 0.0, height) if height > 1 else np.ones(1)
    return np.repeat(colormap_array(values)[:, None, :], width, axis=1)


def append_heatbar(image: RasterImage) -> RasterImage:
    return RasterImage(np.concatenate([image.pixels, heatbar(image.height)], axis=1))


def render_heatmap(
    h: ArrayLike,
    scale: int = DEFAULT_SCALE,
    upsample: Upsample = "bilinear",
    with_heatbar: bool = True,
) -> RasterImage:
    """Upscale a normalised heatmap, colour it and put the heatbar on its right edge.

    Values outside [0, 1] are clamped with a warning.

    Args:
        h (ArrayLike): Heatmap of shape (H, W).
        scale (int, optional): Integer upscale factor. Defaults to 6.
        upsample (str, optional): "nearest" or "bilinear". Defaults to "bilinear".
        with_heatbar (bool, optional): Append the 16-pixel heatbar. Defaults to True.

    Returns:
        RasterImage: Image of width W * scale (+ 16) and height H * scale.
    """
    heat = np.asarray(h, dtype=np.float64)
    if heat.ndim != 2:
        raise ShapeError("heatmap (rank 2 required)", (-1, -1), heat.shape)
    if int(scale) != scale or scale < 1:
        raise DomainError(f"render scale must be a positive integer, got {scale}")
    if upsample not in ("nearest", "bilinear"):
        raise DomainError(f"upsample must be 'nearest' or 'bilinear', got {upsample}")
    if heat.min() < 0.0 or heat.max() > 1.0:
        logger.warning(f"heatmap values [{heat.min():.4g}, {heat.max():.4g}] clamped to [0, 1] for rendering")
        heat = np.clip(heat, 0.0, 1.0)

    resize = upsample_bilinear if upsample == "bilinear" else upsample_nearest
    body = RasterImage(colormap_array(np.asarray(resize(heat, int(scale)), dtype=np.float64)))
    return append_heatbar(body) if with_heatbar else body


def overlay(base: RasterImage, heat: RasterImage, alpha: float = DEFAULT_ALPHA) -> RasterImage:
    """Per-channel blend round(alpha * heat + (1 - alpha) * base), halves rounded up."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"overlay alpha must lie in [0, 1], got {alpha}")
    if base.dims != heat.dims:
        raise ShapeError("overlay heat vs base (width, height)", base.dims, heat.dims)
    blend = alpha * heat.pixels.astype(np.float64) + (1.0 - alpha) * base.pixels.astype(np.float64)
    return RasterImage(_round_half_up(blend))


def encode_ppm(image: RasterImage) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image.pixels).tobytes()


def write_ppm(path: PathLike, image: RasterImage) -> Path:
    path = Path(path)
    path.write_bytes(encode_ppm(image))
    logger.debug(f"wrote {image.width}x{image.height} image to {path}")
    return path


def read_image(path: PathLike) -> RasterImage:
    """Load any Pillow-readable image (PPM included) as RGB."""
    try:
        with Image.open(path) as img:
            return RasterImage(np.array(img.convert("RGB"), dtype=np.uint8))
    except (UnidentifiedImageError, OSError) as err:
        raise FormatError(f"cannot read image {path}: {err}") from err
