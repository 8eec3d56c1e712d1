"""
Linear-Snake convolution.

Each grid cell owns two 9-position sampling paths, one along x and one along y,
indexed k = -4 .. 4 (slot k + 4). Along the x path the column advances one stride
per step while the row drifts by the cumulative offset sum_dy[k]:

    k >= 0:  (x + k + 1, y + sum_dy[k] + 1)
    k <  0:  (x + k - 1, y + sum_dy[k] - 1)

The y path is the same with the axes exchanged. The +/-1 unit shifts can be
switched off (`unit_shift=False`). The snake branch samples the path bilinearly
and dots it with a strip kernel; the linear branch is a plain axis-aligned 3-tap
convolution; `fuse_paths` blends the two.
"""
from dataclasses import dataclass
from typing import Literal, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hmpe.utils.errors import DomainError, ShapeError
from hmpe.utils.numerics import (
    ArrayLike,
    Rng,
    Tensor,
    as_tensor,
    bilinear_gather,
    check_rank,
    check_shape,
)

Axis = Literal["x", "y"]
AXES = ("x", "y")
HALF_PATH = 4
PATH_LEN = 2 * HALF_PATH + 1
STEPS = 2 * HALF_PATH
MAX_DISPLACEMENT = 9.0
DEFAULT_FUSION = 0.5
ORIENTATION = {"x": "horizontal", "y": "vertical"}
# slots of the three centermost path positions (k = -1, 0, 1)
CENTRE_SLOTS = slice(HALF_PATH - 1, HALF_PATH + 2)


def _check_axis(axis: str) -> None:
    if axis not in AXES:
        raise DomainError(f"axis must be 'x' or 'y', got '{axis}'")


@dataclass(frozen=True)
class OffsetField:
    """Cumulative offsets per cell and path slot, both of shape (H, W, 9).

    `dy_x_path` holds the row drift of the x path, `dx_y_path` the column drift of
    the y path. Slot 4 (the centre) is always 0.
    """

    dy_x_path: Tensor
    dx_y_path: Tensor

    def __post_init__(self):
        check_rank("dy_x_path", self.dy_x_path, 3)
        if self.dy_x_path.shape[2] != PATH_LEN:
            raise ShapeError("dy_x_path", self.dy_x_path.shape[:2] + (PATH_LEN,), self.dy_x_path.shape)
        check_shape("dx_y_path", self.dx_y_path, self.dy_x_path.shape)
        for name, field in (("dy_x_path", self.dy_x_path), ("dx_y_path", self.dx_y_path)):
            if np.max(np.abs(field)) > MAX_DISPLACEMENT:
                raise DomainError(f"{name} exceeds the {MAX_DISPLACEMENT:g}-stride displacement bound")

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.dy_x_path.shape[0], self.dy_x_path.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "OffsetField":
        zero = as_tensor(np.zeros((height, width, PATH_LEN)))
        return cls(dy_x_path=zero, dx_y_path=zero)

    @classmethod
    def from_steps(cls, steps_x: ArrayLike, steps_y: ArrayLike) -> "OffsetField":
        """Accumulate per-step offsets (H, W, 8) outward from the centre.

        Steps 0..3 are k = +1..+4 and steps 4..7 are k = -1..-4.
        """
        return cls(dy_x_path=_accumulate(steps_x), dx_y_path=_accumulate(steps_y))

    def along(self, axis: Axis) -> Tensor:
        _check_axis(axis)
        return self.dy_x_path if axis == "x" else self.dx_y_path


def _accumulate(steps: ArrayLike) -> Tensor:
    s = np.asarray(steps, dtype=np.float64)
    check_rank("per-step offsets", s, 3)
    if s.shape[2] != STEPS:
        raise ShapeError("per-step offsets", s.shape[:2] + (STEPS,), s.shape)
    cum = np.zeros(s.shape[:2] + (PATH_LEN,))
    cum[..., HALF_PATH + 1:] = np.cumsum(s[..., :HALF_PATH], axis=-1)
    cum[..., :HALF_PATH] = np.cumsum(s[..., HALF_PATH:], axis=-1)[..., ::-1]
    return as_tensor(cum, "cumulative offsets")


@dataclass(frozen=True)
class StripKernel:
    """Three taps applied left-to-right (horizontal, x axis) or top-to-bottom (vertical, y axis)."""

    taps: Tuple[float, float, float]
    orientation: Literal["horizontal", "vertical"] = "horizontal"

    def __post_init__(self):
        if len(self.taps) != 3:
            raise DomainError(f"strip kernel needs exactly 3 taps, got {len(self.taps)}")
        if self.orientation not in ORIENTATION.values():
            raise DomainError(f"unknown kernel orientation '{self.orientation}'")

    @classmethod
    def smoothing(cls, axis: Axis = "x") -> "StripKernel":
        _check_axis(axis)
        return cls(taps=(0.25, 0.5, 0.25), orientation=ORIENTATION[axis])


@dataclass(frozen=True)
class PathKernel:
    """Nine weights dotted with every position of a snake path."""

    taps: Tuple[float, ...]
    orientation: Literal["horizontal", "vertical"] = "horizontal"

    def __post_init__(self):
        if len(self.taps) != PATH_LEN:
            raise DomainError(f"path kernel needs exactly {PATH_LEN} taps, got {len(self.taps)}")
        if self.orientation not in ORIENTATION.values():
            raise DomainError(f"unknown kernel orientation '{self.orientation}'")

    @classmethod
    def binomial(cls, axis: Axis = "x") -> "PathKernel":
        _check_axis(axis)
        taps = np.array([1, 8, 28, 56, 70, 56, 28, 8, 1], dtype=np.float64) / 256.0
        return cls(taps=tuple(taps), orientation=ORIENTATION[axis])


Kernel = Union[StripKernel, PathKernel]


@dataclass(frozen=True)
class SamplePath:
    """Nine (x, y) sampling positions, ordered k = -4 .. 4."""

    positions: np.ndarray
    axis: str

    @property
    def xs(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.positions[:, 1]


@dataclass(frozen=True)
class OffsetPredictor:
    """3x3 convolution predicting 8 per-step offsets for each of the two paths.

    weights: (2, 8, 3, 3) indexed (path, step, row tap, column tap); bias: (2, 8).
    """

    weights: Tensor
    bias: Tensor

    def __post_init__(self):
        check_shape("offset predictor weights", self.weights, (2, STEPS, 3, 3))
        check_shape("offset predictor bias", self.bias, (2, STEPS))

    @classmethod
    def random(cls, rng: Rng, scale: float = 0.3) -> "OffsetPredictor":
        return cls(weights=rng.normal((2, STEPS, 3, 3), scale), bias=as_tensor(np.zeros((2, STEPS))))

    @classmethod
    def zeros(cls) -> "OffsetPredictor":
        return cls(weights=as_tensor(np.zeros((2, STEPS, 3, 3))), bias=as_tensor(np.zeros((2, STEPS))))


@dataclass(frozen=True)
class LSConvWeights:
    """Everything one dual-axis LSConv block needs besides the feature map."""

    predictor: OffsetPredictor
    x_kernel: StripKernel
    y_kernel: StripKernel
    x_path_kernel: Optional[PathKernel] = None
    y_path_kernel: Optional[PathKernel] = None

    @classmethod
    def default(cls, rng: Rng, taps: int = 3) -> "LSConvWeights":
        if taps not in (3, PATH_LEN):
            raise DomainError(f"taps must be 3 or {PATH_LEN}, got {taps}")
        nine = taps == PATH_LEN
        return cls(
            predictor=OffsetPredictor.random(rng),
            x_kernel=StripKernel.smoothing("x"),
            y_kernel=StripKernel.smoothing("y"),
            x_path_kernel=PathKernel.binomial("x") if nine else None,
            y_path_kernel=PathKernel.binomial("y") if nine else None,
        )


def _conv3x3_windows(feature: np.ndarray) -> np.ndarray:
    padded = np.pad(feature, 1, mode="edge")
    return sliding_window_view(padded, (3, 3))


def predict_offsets(feature: ArrayLike, predictor: OffsetPredictor) -> OffsetField:
    """Per-step offsets tanh(conv3x3(feature)), accumulated outward from the centre.

    Every step is capped at one grid unit, so the cumulative offsets never exceed 4.
    """
    fmap = np.asarray(feature, dtype=np.float64)
    check_rank("feature", fmap, 2)
    raw = np.einsum("hwuv,psuv->phws", _conv3x3_windows(fmap), np.asarray(predictor.weights, dtype=np.float64))
    raw = raw + np.asarray(predictor.bias, dtype=np.float64)[:, None, None, :]
    steps = np.tanh(raw)
    return OffsetField.from_steps(steps[0], steps[1])


def path_grid(offsets: OffsetField, axis: Axis, unit_shift: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Sampling coordinates of every cell's path, as (xs, ys) each of shape (H, W, 9).

    Displacements from the cell are clamped to the 9-stride bound.
    """
    _check_axis(axis)
    height, width = offsets.spatial
    k = np.arange(-HALF_PATH, HALF_PATH + 1, dtype=np.float64)
    shift = np.where(k >= 0, 1.0, -1.0) if unit_shift else np.zeros_like(k)
    drift = np.asarray(offsets.along(axis), dtype=np.float64)

    along = np.broadcast_to(k + shift, drift.shape)
    across = drift + shift
    along, across = (np.clip(d, -MAX_DISPLACEMENT, MAX_DISPLACEMENT) for d in (along, across))

    rows = np.arange(height, dtype=np.float64)[:, None, None]
    cols = np.arange(width, dtype=np.float64)[None, :, None]
    if axis == "x":
        return cols + along, rows + across
    return cols + across, rows + along


def _single_path(center: Tuple[int, int], offsets: OffsetField, axis: Axis, unit_shift: bool) -> SamplePath:
    x, y = center
    height, width = offsets.spatial
    if not (0 <= x < width and 0 <= y < height):
        raise DomainError(f"centre {center} outside the {width}x{height} grid")
    xs, ys = path_grid(offsets, axis, unit_shift)
    return SamplePath(positions=np.stack([xs[y, x], ys[y, x]], axis=-1), axis=axis)


def snake_path_x(center: Tuple[int, int], offsets: OffsetField, unit_shift: bool = True) -> SamplePath:
    """The nine x-path positions of the cell at `center` = (x, y)."""
    return _single_path(center, offsets, "x", unit_shift)


def snake_path_y(center: Tuple[int, int], offsets: OffsetField, unit_shift: bool = True) -> SamplePath:
    """The nine y-path positions of the cell at `center` = (x, y)."""
    return _single_path(center, offsets, "y", unit_shift)


def _check_kernel(kernel: Kernel, axis: Axis) -> None:
    _check_axis(axis)
    if kernel.orientation != ORIENTATION[axis]:
        raise DomainError(f"{kernel.orientation} kernel cannot run along axis {axis}")


def snake_conv(
    feature: ArrayLike,
    kernel: Kernel,
    offsets: OffsetField,
    axis: Axis,
    unit_shift: bool = True,
) -> Tensor:
    """Dot each cell's bilinearly sampled snake path with the kernel taps.

    A StripKernel binds to the three centermost positions (k = -1, 0, 1); a
    PathKernel to all nine. Samples outside the map clamp to the border.
    """
    _check_kernel(kernel, axis)
    fmap = np.asarray(feature, dtype=np.float64)
    check_rank("feature", fmap, 2)
    if fmap.shape != offsets.spatial:
        raise ShapeError("feature vs offsets", offsets.spatial, fmap.shape)
    xs, ys = path_grid(offsets, axis, unit_shift)
    if isinstance(kernel, StripKernel):
        xs, ys = xs[..., CENTRE_SLOTS], ys[..., CENTRE_SLOTS]
    samples = bilinear_gather(fmap, xs, ys)
    return as_tensor(samples @ np.asarray(kernel.taps, dtype=np.float64), "snake output")


def linear_conv(feature: ArrayLike, kernel: StripKernel, axis: Axis) -> Tensor:
    """Axis-aligned 3-tap convolution with replicate border padding."""
    _check_kernel(kernel, axis)
    fmap = np.asarray(feature, dtype=np.float64)
    check_rank("feature", fmap, 2)
    windows = _conv3x3_windows(fmap)
    line = windows[:, :, 1, :] if axis == "x" else windows[:, :, :, 1]
    return as_tensor(line @ np.asarray(kernel.taps, dtype=np.float64), "linear output")


def continuity_penalty(offsets: OffsetField) -> float:
    """Sum of squared second differences of the cumulative offsets along every path.

    Zero exactly when each path's per-step increments are constant.
    """
    total = 0.0
    for field in (offsets.dy_x_path, offsets.dx_y_path):
        second = np.diff(np.asarray(field, dtype=np.float64), n=2, axis=-1)
        total += float(np.sum(second * second))
    return total


def fuse_paths(snake_out: ArrayLike, linear_out: ArrayLike, w: float = DEFAULT_FUSION) -> Tensor:
    """w * snake_out + (1 - w) * linear_out, w in [0, 1]."""
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"fusion weight must lie in [0, 1], got {w}")
    snake = np.asarray(snake_out, dtype=np.float64)
    linear = np.asarray(linear_out, dtype=np.float64)
    check_shape("linear output", linear, snake.shape)
    return as_tensor(w * snake + (1.0 - w) * linear, "fused output")


def lsconv_block(
    feature: ArrayLike,
    weights: LSConvWeights,
    fusion_w: float = DEFAULT_FUSION,
    unit_shift: bool = True,
    offsets: Optional[OffsetField] = None,
) -> Tuple[Tensor, float]:
    """Run the snake and linear branches along both axes and average the two fused maps.

    Args:
        feature (ArrayLike): Feature map (H, W).
        weights (LSConvWeights): Offset predictor and kernels.
        fusion_w (float, optional): Snake weight in each axis fusion. Defaults to 0.5.
        unit_shift (bool, optional): Keep the +/-1 path shifts. Defaults to True.
        offsets (OffsetField, optional): Use these instead of predicting them.

    Returns:
        Tuple[Tensor, float]: The processed map and the continuity penalty of its offsets.
    """
    fmap = np.asarray(feature, dtype=np.float64)
    field = predict_offsets(fmap, weights.predictor) if offsets is None else offsets
    fused = []
    for axis, strip, path_kernel in (
        ("x", weights.x_kernel, weights.x_path_kernel),
        ("y", weights.y_kernel, weights.y_path_kernel),
    ):
        snake = snake_conv(fmap, path_kernel or strip, field, axis, unit_shift)
        fused.append(np.asarray(fuse_paths(snake, linear_conv(fmap, strip, axis), fusion_w), dtype=np.float64))
    return as_tensor(0.5 * (fused[0] + fused[1]), "lsconv output"), continuity_penalty(field)


def lsconv_channels(
    activations: ArrayLike,
    weights: LSConvWeights,
    fusion_w: float = DEFAULT_FUSION,
    unit_shift: bool = True,
) -> Tuple[Tensor, float]:
    """Apply `lsconv_block` to every channel of a (K, H, W) tensor; penalties are summed."""
    a = np.asarray(activations, dtype=np.float64)
    check_rank("activations", a, 3)
    outputs, penalty = [], 0.0
    for channel in a:
        out, p = lsconv_block(channel, weights, fusion_w, unit_shift)
        outputs.append(out)
        penalty += p
    return as_tensor(np.stack(outputs)), penalty
