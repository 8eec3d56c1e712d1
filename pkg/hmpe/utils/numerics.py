"""
Dense tensor helpers every other hmpe module builds on.

Tensors are plain numpy arrays. Public operations accept any float array, do
their arithmetic in float64 and hand back read-only float32 arrays that have
been checked for NaN/Inf (see `as_tensor`).

    from hmpe.utils.numerics import Rng, bilinear_sample

    rng = Rng(0)
    fmap = rng.uniform((4, 4))
    bilinear_sample(fmap, 0.25, 0.75)
"""
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from hmpe.utils.errors import DomainError, ShapeError

Tensor = npt.NDArray[np.float32]
ArrayLike = Union[npt.ArrayLike, Tensor]

# central-difference step per derivative order
DEFAULT_STEPS = {1: 1e-4, 2: 1e-3, 3: 5e-2}


def as_tensor(x: ArrayLike, what: str = "tensor") -> Tensor:
    """Store `x` as an immutable, finite float32 array.

    Args:
        x (ArrayLike): Values to store.
        what (str, optional): Name used in the error message. Defaults to "tensor".

    Raises:
        DomainError: If any element is NaN or infinite.

    Returns:
        Tensor: A read-only float32 copy of `x`.
    """
    arr = np.array(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains non-finite values")
    arr.setflags(write=False)
    return arr


def check_shape(what: str, arr: np.ndarray, expected: Sequence[int]) -> None:
    if tuple(arr.shape) != tuple(expected):
        raise ShapeError(what, expected, arr.shape)


def check_rank(what: str, arr: np.ndarray, rank: int) -> None:
    if arr.ndim != rank:
        raise ShapeError(f"{what} (rank {rank} required)", (-1,) * rank, arr.shape)


@dataclass
class MacCounter:
    """Tally of multiply-accumulate operations, keyed by the op that spent them."""

    counts: Counter = field(default_factory=Counter)

    def add(self, tag: str, macs: int) -> None:
        self.counts[tag] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


class Rng:
    """Seeded random stream.

    Two instances built from the same seed and key emit identical sequences.
    `spawn` derives independent child streams, so that e.g. the weights of decoder
    layer 2 do not depend on how many layers are built after it.

    Args:
        seed (int): Non-negative 64-bit seed.
        key (Tuple[int, ...], optional): Spawn path below the root seed.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        if seed < 0 or seed >= 2 ** 64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"

    def spawn(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, shape: Sequence[int], low: float = 0.0, high: float = 1.0) -> Tensor:
        return as_tensor(self._gen.uniform(low, high, size=tuple(shape)))

    def normal(self, shape: Sequence[int], scale: float = 1.0) -> Tensor:
        return as_tensor(self._gen.normal(0.0, scale, size=tuple(shape)))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def relu(x: ArrayLike) -> Tensor:
    """Element-wise max(0, x)."""
    return as_tensor(np.maximum(np.asarray(x, dtype=np.float64), 0.0), "relu")


def softmax_rows(x: ArrayLike) -> Tensor:
    """Row-wise softmax of a rank-2 array, stabilised by subtracting the row max.

    Args:
        x (ArrayLike): Logits of shape (rows, cols).

    Returns:
        Tensor: Row-stochastic array of the same shape.
    """
    logits = np.asarray(x, dtype=np.float64)
    check_rank("softmax_rows input", logits, 2)
    return as_tensor(stable_softmax(logits), "softmax")


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def bilinear_gather(
    fmap: ArrayLike,
    xs: ArrayLike,
    ys: ArrayLike,
    counter: Optional[MacCounter] = None,
) -> np.ndarray:
    """Bilinearly sample a (H, W) or (H, W, C) map at many points.

    Coordinates are (x=column, y=row) in pixel units. Points outside the map are
    clamped to the border (replicate padding).

    Args:
        fmap (ArrayLike): Map of shape (H, W) or (H, W, C).
        xs (ArrayLike): Column coordinates, any shape S.
        ys (ArrayLike): Row coordinates, same shape S.
        counter (MacCounter, optional): Charged 4 MACs per sample and channel.

    Returns:
        np.ndarray: float64 samples of shape S (rank-2 map) or S + (C,).
    """
    grid = np.asarray(fmap, dtype=np.float64)
    if grid.ndim not in (2, 3):
        raise ShapeError("bilinear map (rank 2 or 3 required)", (-1, -1), grid.shape)
    height, width = grid.shape[:2]
    x = np.clip(np.asarray(xs, dtype=np.float64), 0.0, width - 1)
    y = np.clip(np.asarray(ys, dtype=np.float64), 0.0, height - 1)
    if x.shape != y.shape:
        raise ShapeError("bilinear coordinates", x.shape, y.shape)

    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    if grid.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    top = grid[y0, x0] * (1.0 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1.0 - fx) + grid[y1, x1] * fx
    if counter is not None:
        channels = grid.shape[2] if grid.ndim == 3 else 1
        counter.add("bilinear", 4 * x.size * channels)
    return top * (1.0 - fy) + bottom * fy


def bilinear_sample(fmap: ArrayLike, x: float, y: float) -> float:
    """Sample a rank-2 map at one point, x being the column and y the row.

    Exact at integer coordinates; out-of-range coordinates clamp to the border.
    """
    grid = np.asarray(fmap, dtype=np.float64)
    check_rank("bilinear_sample map", grid, 2)
    return float(np.float32(bilinear_gather(grid, x, y)))


def upsample_bilinear(fmap: ArrayLike, factor: int) -> Tensor:
    """Upsample a rank-2 map by an integer factor with half-pixel-centre bilinear sampling.

    Output values stay inside [min(fmap), max(fmap)]; factor 1 is the identity.
    """
    grid = np.asarray(fmap, dtype=np.float64)
    check_rank("upsample map", grid, 2)
    if int(factor) != factor or factor < 1:
        raise DomainError(f"upsample factor must be a positive integer, got {factor}")
    height, width = grid.shape
    rows = (np.arange(height * factor) + 0.5) / factor - 0.5
    cols = (np.arange(width * factor) + 0.5) / factor - 0.5
    ys, xs = np.meshgrid(rows, cols, indexing="ij")
    return as_tensor(bilinear_gather(grid, xs, ys), "upsampled map")


def upsample_nearest(fmap: ArrayLike, factor: int) -> Tensor:
    """Upsample a rank-2 map by repeating every cell `factor` times along each axis."""
    grid = np.asarray(fmap, dtype=np.float64)
    check_rank("upsample map", grid, 2)
    if int(factor) != factor or factor < 1:
        raise DomainError(f"upsample factor must be a positive integer, got {factor}")
    return as_tensor(np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1))


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: ArrayLike,
    order: int = 1,
    h: Optional[float] = None,
) -> Tensor:
    """Central-difference estimate of the same-element partials of a scalar function.

    Every element is perturbed on its own, so the result holds
    d^order f / dx_i^order for each i; cross partials are never formed.
    `f` receives float64 arrays shaped like `x`.

    Args:
        f (Callable[[np.ndarray], float]): Scalar function of an array.
        x (ArrayLike): Point of evaluation.
        order (int, optional): 1, 2 or 3. Defaults to 1.
        h (float, optional): Step size. Defaults to DEFAULT_STEPS[order].

    Returns:
        Tensor: Estimated partials, shaped like `x`.
    """
    if order not in DEFAULT_STEPS:
        raise DomainError(f"derivative order must be 1, 2 or 3, got {order}")
    step = DEFAULT_STEPS[order] if h is None else float(h)
    if not step > 0:
        raise DomainError(f"finite-difference step must be positive, got {h}")

    point = np.array(x, dtype=np.float64)
    flat = point.reshape(-1)
    out = np.empty_like(flat)
    centre = float(f(point)) if order == 2 else 0.0

    def shifted(i: int, delta: float) -> float:
        original = flat[i]
        flat[i] = original + delta
        value = float(f(point))
        flat[i] = original
        return value

    for i in range(flat.size):
        if order == 1:
            out[i] = (shifted(i, step) - shifted(i, -step)) / (2.0 * step)
        elif order == 2:
            out[i] = (shifted(i, step) - 2.0 * centre + shifted(i, -step)) / step ** 2
        else:
            out[i] = (
                shifted(i, 2 * step) - 2.0 * shifted(i, step)
                + 2.0 * shifted(i, -step) - shifted(i, -2 * step)
            ) / (2.0 * step ** 3)
    return as_tensor(out.reshape(point.shape), "finite-difference estimate")


def linear_map(
    weight: ArrayLike,
    bias: Optional[ArrayLike],
    x: ArrayLike,
    counter: Optional[MacCounter] = None,
) -> Tensor:
    """Affine map x @ W.T + b.

    Args:
        weight (ArrayLike): Weights of shape (out, in).
        bias (ArrayLike, optional): Bias of shape (out,), or None.
        x (ArrayLike): Inputs of shape (rows, in).
        counter (MacCounter, optional): Charged rows * out * in MACs.

    Raises:
        ShapeError: If the inner dimensions or the bias length disagree.

    Returns:
        Tensor: Outputs of shape (rows, out).
    """
    w = np.asarray(weight, dtype=np.float64)
    inputs = np.asarray(x, dtype=np.float64)
    check_rank("linear_map weight", w, 2)
    check_rank("linear_map input", inputs, 2)
    if inputs.shape[1] != w.shape[1]:
        raise ShapeError(
            f"linear_map input vs weight {w.shape}", (inputs.shape[0], w.shape[1]), inputs.shape
        )
    out = inputs @ w.T
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        check_shape("linear_map bias", b, (w.shape[0],))
        out = out + b
    if counter is not None:
        counter.add("linear", inputs.shape[0] * w.shape[0] * w.shape[1])
    return as_tensor(out, "linear_map output")
