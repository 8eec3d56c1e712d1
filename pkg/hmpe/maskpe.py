"""
Mask filter and heatmap-gated sinusoidal positional encoding.

A normalised heatmap is split into hot cells (heat > tau) and cold cells. The
binary mask keeps the full positional encoding on hot cells and zeroes it on
cold ones:

    PE(i, j, d) = Mask(i, j) * [sin(i / t_d) + cos(j / t_d)],   t_d = 10000^(2d / D)

Note that `tau` (heat threshold) and `t_d` (PE temperature) are unrelated.
"""
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple

import numpy as np

from hmpe.utils.errors import DomainError, ShapeError
from hmpe.utils.numerics import ArrayLike, Tensor, as_tensor, check_rank

DEFAULT_TAU = 0.35
PE_BASE = 10000.0

Cell = Tuple[int, int]


@dataclass(frozen=True)
class MaskFilter:
    """Binary (H, W) mask, 1 on hot cells."""

    mask: Tensor
    tau: float

    @property
    def hot_fraction(self) -> float:
        return float(np.mean(self.mask))


@dataclass(frozen=True)
class PosEncoding:
    """Positional encoding table of shape (H, W, D), D even."""

    pe: Tensor

    def __post_init__(self):
        if self.pe.ndim != 3 or self.pe.shape[2] % 2:
            raise ShapeError("positional encoding (H, W, even D)", (-1, -1, -1), self.pe.shape)

    @property
    def depth(self) -> int:
        return self.pe.shape[2]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.pe.shape[0], self.pe.shape[1]


class RegionSplit(NamedTuple):
    hot: List[Cell]
    cold: List[Cell]


def _check_tau(tau: float) -> None:
    if not 0.0 <= tau < 1.0:
        raise DomainError(f"heat threshold tau must lie in [0, 1), got {tau}")


def mask_from_heatmap(h: ArrayLike, tau: float = DEFAULT_TAU) -> MaskFilter:
    """Mask(i, j) = 1 iff h(i, j) > tau; with tau = 0 zero-heat cells are masked out.

    Args:
        h (ArrayLike): Heatmap normalised to [0, 1], shape (H, W).
        tau (float, optional): Heat threshold in [0, 1). Defaults to 0.35.

    Returns:
        MaskFilter: The binary mask and its threshold.
    """
    _check_tau(tau)
    heat = np.asarray(h, dtype=np.float64)
    check_rank("heatmap", heat, 2)
    return MaskFilter(mask=as_tensor(heat > tau), tau=float(tau))


def pe_temperatures(depth: int) -> np.ndarray:
    """t_d = 10000^(2d / D) for d in 0 .. D/2 - 1."""
    if depth < 2 or depth % 2:
        raise DomainError(f"positional encoding depth must be even and >= 2, got {depth}")
    return np.power(PE_BASE, 2.0 * np.arange(depth // 2) / depth)


def sinusoidal_pe(height: int, width: int, depth: int) -> PosEncoding:
    """Unmasked table pe[i, j, 2d] = pe[i, j, 2d + 1] = sin(i / t_d) + cos(j / t_d)."""
    temps = pe_temperatures(depth)
    rows = np.arange(height, dtype=np.float64)[:, None, None]
    cols = np.arange(width, dtype=np.float64)[None, :, None]
    values = np.sin(rows / temps) + np.cos(cols / temps)
    return PosEncoding(pe=as_tensor(np.repeat(values, 2, axis=-1), "positional encoding"))


def masked_pe(pe: PosEncoding, mask: MaskFilter) -> PosEncoding:
    """Hadamard gate: PE kept bit-for-bit on hot cells, exactly 0.0 on cold cells."""
    if tuple(mask.mask.shape) != pe.spatial:
        raise ShapeError("mask vs positional encoding", pe.spatial, mask.mask.shape)
    gated = np.where(mask.mask[..., None] > 0, pe.pe, np.float32(0.0))
    return PosEncoding(pe=as_tensor(gated))


def classify_regions(h: ArrayLike, tau: float = DEFAULT_TAU) -> RegionSplit:
    """Split the grid into hot cells (h > tau) and cold cells, both in row-major order."""
    hot_mask = np.asarray(mask_from_heatmap(h, tau).mask) > 0
    hot = [(int(i), int(j)) for i, j in zip(*np.nonzero(hot_mask))]
    cold = [(int(i), int(j)) for i, j in zip(*np.nonzero(~hot_mask))]
    return RegionSplit(hot=hot, cold=cold)
