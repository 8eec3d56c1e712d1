"""
Synthetic scenes standing in for backbone features.

Every channel of the activation tensor carries the same Gaussian bump centred on
the target box (with a seeded per-channel gain) plus seeded Gaussian noise. The
image is a flat grey canvas with the target box painted in, upscaled to match
the render scale.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from hmpe.heads import BoxTarget
from hmpe.utils.errors import DomainError
from hmpe.utils.numerics import Rng, Tensor, as_tensor

NOISE_SCALE = 0.1
GAIN_RANGE = (0.5, 1.5)
MIN_SIGMA = 0.75
BACKGROUND = (0.25, 0.25, 0.3)
BOX_COLOUR = (0.85, 0.75, 0.35)

# child of the root seed reserved for the scene, and the scene's own sub-streams
SCENE_STREAM = 0
GAIN_STREAM, NOISE_STREAM, IMAGE_STREAM = 0, 1, 2


@dataclass(frozen=True)
class SyntheticScene:
    image: Tensor
    activations: Tensor
    target: BoxTarget

    @property
    def grid(self) -> Tuple[int, int]:
        return self.activations.shape[1], self.activations.shape[2]


def bump_centre(target: BoxTarget, grid: Tuple[int, int]) -> Tuple[float, float]:
    """Target centre in cell coordinates (x = column, y = row)."""
    height, width = grid
    return target.cx * width - 0.5, target.cy * height - 0.5


def gaussian_bump(target: BoxTarget, grid: Tuple[int, int]) -> np.ndarray:
    height, width = grid
    cx, cy = bump_centre(target, grid)
    sx = max(target.w * width / 4.0, MIN_SIGMA)
    sy = max(target.h * height / 4.0, MIN_SIGMA)
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    return np.exp(-0.5 * (((cols - cx) / sx) ** 2 + ((rows - cy) / sy) ** 2))


def cells_in_box(target: BoxTarget, grid: Tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of the cells whose centres fall inside the box."""
    height, width = grid
    xc = (np.arange(width) + 0.5) / width
    yc = (np.arange(height) + 0.5) / height
    inside_x = np.abs(xc - target.cx) <= target.w / 2
    inside_y = np.abs(yc - target.cy) <= target.h / 2
    return inside_y[:, None] & inside_x[None, :]


def random_target(rng: Rng) -> BoxTarget:
    """Box with centre in [0.2, 0.8]^2 and sides in [0.15, 0.4]."""
    cx, cy = rng.uniform((2,), 0.2, 0.8)
    w, h = rng.uniform((2,), 0.15, 0.4)
    return BoxTarget(float(cx), float(cy), float(w), float(h))


def synth(seed: int, dims: Tuple[int, int, int], target: BoxTarget, scale: int = 6) -> SyntheticScene:
    """Build the deterministic scene for (seed, dims, target).

    Args:
        seed (int): Root seed.
        dims (Tuple[int, int, int]): Activation shape (K, H, W).
        target (BoxTarget): Box the bump is centred on.
        scale (int, optional): Image pixels per grid cell. Defaults to 6.

    Returns:
        SyntheticScene: Image (3, H * scale, W * scale), activations (K, H, W) and target.
    """
    channels, height, width = dims
    if min(dims) < 1:
        raise DomainError(f"scene dims must be positive, got {dims}")
    if scale < 1:
        raise DomainError(f"image scale must be at least 1, got {scale}")
    rng = Rng(seed).spawn(SCENE_STREAM)

    gains = np.asarray(rng.spawn(GAIN_STREAM).uniform((channels,), *GAIN_RANGE), dtype=np.float64)
    noise = np.asarray(rng.spawn(NOISE_STREAM).normal((channels, height, width), NOISE_SCALE), dtype=np.float64)
    activations = gains[:, None, None] * gaussian_bump(target, (height, width))[None] + noise

    rows, cols = height * scale, width * scale
    canvas = np.empty((3, rows, cols), dtype=np.float64)
    canvas[:] = np.asarray(BACKGROUND)[:, None, None]
    y0, y1 = int(round((target.cy - target.h / 2) * rows)), int(round((target.cy + target.h / 2) * rows))
    x0, x1 = int(round((target.cx - target.w / 2) * cols)), int(round((target.cx + target.w / 2) * cols))
    canvas[:, max(y0, 0):y1, max(x0, 0):x1] = np.asarray(BOX_COLOUR)[:, None, None]
    canvas += np.asarray(rng.spawn(IMAGE_STREAM).normal((3, rows, cols), 0.03), dtype=np.float64)

    return SyntheticScene(
        image=as_tensor(np.clip(canvas, 0.0, 1.0), "scene image"),
        activations=as_tensor(activations, "scene activations"),
        target=target,
    )
