"""
Encoder-side heatmap fusion.

Class and box heatmaps are lifted to token sequences (heat value times a
projection vector, plus the masked positional encoding), concatenated along depth
and projected to Q, K, V:

    Q_enc = W_Q [E_class || E_bbox],  K_enc = W_K [...],  V_enc = W_V [...]

followed by plain multi-head scaled dot-product self-attention.
"""
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

from hmpe import logger
from hmpe.maskpe import PosEncoding
from hmpe.utils.errors import DomainError, ShapeError
from hmpe.utils.numerics import (
    ArrayLike,
    MacCounter,
    Rng,
    Tensor,
    stable_softmax,
    as_tensor,
    check_rank,
    check_shape,
    linear_map,
    upsample_bilinear,
)

Source = Literal["class", "bbox", "mixed"]
DEFAULT_HEADS = 8
DEFAULT_DEPTH = 64


@dataclass(frozen=True)
class EmbeddingSeq:
    """Tokens (N, D), N = H * W in row-major order, plus the heat each token came from."""

    tokens: Tensor
    source: str
    heat: Tensor
    grid: Tuple[int, int]

    def __post_init__(self):
        n_cells = self.grid[0] * self.grid[1]
        if self.tokens.ndim != 2 or self.tokens.shape[0] != n_cells:
            raise ShapeError(f"{self.source} tokens for grid {self.grid}", (n_cells, -1), self.tokens.shape)
        check_shape(f"{self.source} token heat", self.heat, (n_cells,))

    @property
    def depth(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class QkvProjections:
    """Bias-free projections W_Q, W_K, W_V, each of shape (D_out, 2D)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        check_rank("W_Q", self.w_q, 2)
        for name, w in (("W_K", self.w_k), ("W_V", self.w_v)):
            check_shape(name, w, self.w_q.shape)
        if self.w_q.shape[1] % 2:
            raise ShapeError("Q/K/V projections (D_out, 2D)", (self.w_q.shape[0], -1), self.w_q.shape)

    @classmethod
    def random(cls, rng: Rng, depth: int, out_depth: Optional[int] = None) -> "QkvProjections":
        out_depth = depth if out_depth is None else out_depth
        scale = 1.0 / np.sqrt(2 * depth)
        return cls(*(rng.uniform((out_depth, 2 * depth), -scale, scale) for _ in range(3)))


@dataclass(frozen=True)
class EncoderOutput:
    q: Tensor
    k_enc: Tensor
    v_enc: Tensor
    attn_weights: Tensor


def embed_heatmap(
    h: ArrayLike,
    proj: ArrayLike,
    pe: PosEncoding,
    source: Source = "class",
) -> EmbeddingSeq:
    """token(p) = proj * h(p) + pe(p), flattened row-major to (H * W, D).

    Args:
        h (ArrayLike): Heatmap of shape (H, W).
        proj (ArrayLike): Projection of the scalar heat, shape (D, 1).
        pe (PosEncoding): Masked positional encoding (H, W, D).
        source (str, optional): Tag recorded on the sequence. Defaults to "class".

    Returns:
        EmbeddingSeq: The token sequence.
    """
    heat = np.asarray(h, dtype=np.float64)
    check_rank("heatmap", heat, 2)
    if tuple(heat.shape) != pe.spatial:
        raise ShapeError("heatmap vs positional encoding", pe.spatial, heat.shape)
    p = np.asarray(proj, dtype=np.float64)
    check_shape("heat projection", p, (pe.depth, 1))

    flat_heat = heat.reshape(-1)
    tokens = flat_heat[:, None] * p[:, 0][None, :] + np.asarray(pe.pe, dtype=np.float64).reshape(-1, pe.depth)
    return EmbeddingSeq(
        tokens=as_tensor(tokens, f"{source} tokens"),
        source=source,
        heat=as_tensor(flat_heat),
        grid=(heat.shape[0], heat.shape[1]),
    )


def fuse_qkv(
    e_class: EmbeddingSeq,
    e_bbox: EmbeddingSeq,
    proj: QkvProjections,
    counter: Optional[MacCounter] = None,
) -> Tuple[Tensor, Tensor, Tensor]:
    """Concatenate the class and box tokens along depth and project to Q, K, V."""
    if e_class.tokens.shape != e_bbox.tokens.shape:
        raise ShapeError("box tokens vs class tokens", e_class.tokens.shape, e_bbox.tokens.shape)
    joint = np.concatenate([e_class.tokens, e_bbox.tokens], axis=1)
    return tuple(linear_map(w, None, joint, counter) for w in (proj.w_q, proj.w_k, proj.w_v))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n_tokens, depth = x.shape
    if heads < 1 or depth % heads:
        raise DomainError(f"depth {depth} is not divisible by {heads} heads")
    return x.reshape(n_tokens, heads, depth // heads).transpose(1, 0, 2)


def attention_logits(q: ArrayLike, k: ArrayLike, heads: int) -> Tensor:
    """Per-head scaled scores q_h k_h^T / sqrt(D / heads), shape (heads, N, N)."""
    queries = np.asarray(q, dtype=np.float64)
    keys = np.asarray(k, dtype=np.float64)
    check_rank("Q", queries, 2)
    check_shape("K", keys, (keys.shape[0], queries.shape[1]))
    qh, kh = _split_heads(queries, heads), _split_heads(keys, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    return as_tensor(qh @ kh.transpose(0, 2, 1) * scale, "attention logits")


def attention_weights(q: ArrayLike, k: ArrayLike, heads: int) -> Tensor:
    """Row-stochastic attention matrices, shape (heads, N, N)."""
    logits = np.asarray(attention_logits(q, k, heads), dtype=np.float64)
    return as_tensor(stable_softmax(logits), "attention weights")


def multihead_attention(q: ArrayLike, k: ArrayLike, v: ArrayLike, heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated back to (N, D)."""
    values = np.asarray(v, dtype=np.float64)
    keys = np.asarray(k, dtype=np.float64)
    check_shape("V", values, keys.shape)
    weights = np.asarray(attention_weights(q, k, heads), dtype=np.float64)
    out = weights @ _split_heads(values, heads)
    return as_tensor(out.transpose(1, 0, 2).reshape(values.shape[0], -1), "attention output")


def multiscale_fuse(heatmaps: Sequence[ArrayLike], target_dims: Tuple[int, int]) -> Tensor:
    """Bilinearly upsample each map to `target_dims` and average them.

    Raises:
        ShapeError: If a map's dims do not divide the target by one common factor.
    """
    if not heatmaps:
        raise DomainError("multiscale_fuse needs at least one heatmap")
    height, width = target_dims
    upsampled = []
    for h in heatmaps:
        grid = np.asarray(h, dtype=np.float64)
        check_rank("heatmap", grid, 2)
        rows, cols = grid.shape
        if height % rows or width % cols or height // rows != width // cols:
            raise ShapeError("heatmap scale vs target dims", (height, width), grid.shape)
        upsampled.append(np.asarray(upsample_bilinear(grid, height // rows), dtype=np.float64))
    return as_tensor(np.mean(upsampled, axis=0), "fused heatmap")


def encode(
    e_class: EmbeddingSeq,
    e_bbox: EmbeddingSeq,
    proj: QkvProjections,
    heads: int = DEFAULT_HEADS,
) -> EncoderOutput:
    """One fusion-attention step producing the encoder keys and values.

    K_enc is the key projection; V_enc is the attention output over the fused tokens.
    """
    q, k, v = fuse_qkv(e_class, e_bbox, proj)
    weights = attention_weights(q, k, heads)
    v_enc = multihead_attention(q, k, v, heads)
    logger.debug(f"encoded {q.shape[0]} tokens of depth {q.shape[1]} with {heads} heads")
    return EncoderOutput(q=q, k_enc=k, v_enc=v_enc, attn_weights=weights)
