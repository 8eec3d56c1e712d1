"""
Decoder-side query induction and deformable decoding.

Mixed-heatmap tokens are projected to initial queries (Q_dec = W'_Q E_mixed),
low-heat queries are suppressed, and a stack of L deformable-attention layers
refines the survivors against the encoder values:

    layer(q) = x + W_ffn x + b_ffn,   x = q + W_out DeformAttn(q, K_enc, V_enc)

Every layer's output and its exact multiply-accumulate count are reported, which
is what the decoder-depth ablation is built from.
"""
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from hmpe import logger
from hmpe.heatmaps import normalize_heatmap
from hmpe.mohfe import EmbeddingSeq
from hmpe.utils.errors import DomainError, NoHotQueriesError, ShapeError
from hmpe.utils.numerics import (
    ArrayLike,
    MacCounter,
    Rng,
    Tensor,
    as_tensor,
    bilinear_gather,
    check_rank,
    check_shape,
    linear_map,
    stable_softmax,
)

Reweight = Literal["hard", "soft"]
REWEIGHT_MODES = ("hard", "soft")
MAX_LAYERS = 8
DEFAULT_LAYERS = 3
DEFAULT_POINTS = 4
DEFAULT_TOP_M = 100
WEIGHT_SUM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class QuerySet:
    """Queries (M, D) with their heat scores and the flat grid cell each came from."""

    queries: Tensor
    scores: Tensor
    cells: np.ndarray
    grid: Tuple[int, int]

    def __post_init__(self):
        check_rank("queries", self.queries, 2)
        n_queries = self.queries.shape[0]
        check_shape("query scores", self.scores, (n_queries,))
        check_shape("query cells", self.cells, (n_queries,))
        if n_queries > self.grid[0] * self.grid[1]:
            raise ShapeError("query count vs encoder tokens", (self.grid[0] * self.grid[1],), (n_queries,))

    def __len__(self) -> int:
        return self.queries.shape[0]

    def with_queries(self, queries: ArrayLike) -> "QuerySet":
        return QuerySet(queries=as_tensor(queries), scores=self.scores, cells=self.cells, grid=self.grid)

    def reference_points(self) -> Tensor:
        """Each query's own cell as normalised (x, y) in [0, 1]^2."""
        height, width = self.grid
        rows, cols = np.divmod(self.cells, width)
        return as_tensor(
            np.stack([cols / max(width - 1, 1), rows / max(height - 1, 1)], axis=-1), "reference points"
        )


@dataclass(frozen=True)
class DeformAttnParams:
    """Sampling geometry for M queries with P points each.

    ref_points (M, 2) and offsets (M, P, 2) are normalised (x, y); attn_weights (M, P)
    must be a distribution per query.
    """

    points: int
    ref_points: Tensor
    offsets: Tensor
    attn_weights: Tensor

    def __post_init__(self):
        if self.points < 1:
            raise DomainError(f"need at least one sampling point, got {self.points}")
        check_rank("reference points", self.ref_points, 2)
        n_queries = self.ref_points.shape[0]
        check_shape("sampling offsets", self.offsets, (n_queries, self.points, 2))
        check_shape("attention weights", self.attn_weights, (n_queries, self.points))

    def pixel_positions(self, grid: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
        """Absolute sampling coordinates (xs, ys), each (M, P), in pixel units."""
        return _to_pixels(self.ref_points, self.offsets, grid)


def _to_pixels(refs: ArrayLike, offsets: ArrayLike, grid: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
    height, width = grid
    loc = np.asarray(refs, dtype=np.float64)[:, None, :] + np.asarray(offsets, dtype=np.float64)
    return loc[..., 0] * max(width - 1, 1), loc[..., 1] * max(height - 1, 1)


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = DEFAULT_LAYERS
    heads: int = 8
    points: int = DEFAULT_POINTS
    depth: int = 64
    reweight: Reweight = "hard"

    def __post_init__(self):
        if not 1 <= self.layers <= MAX_LAYERS:
            raise DomainError(f"decoder layers must lie in [1, {MAX_LAYERS}], got {self.layers}")
        if self.heads < 1 or self.depth % self.heads:
            raise DomainError(f"depth {self.depth} is not divisible by {self.heads} heads")
        if self.points < 1:
            raise DomainError(f"need at least one sampling point, got {self.points}")
        if self.reweight not in REWEIGHT_MODES:
            raise DomainError(f"reweight must be one of {REWEIGHT_MODES}, got {self.reweight}")

    @property
    def head_depth(self) -> int:
        return self.depth // self.heads


@dataclass(frozen=True)
class DecoderLayerWeights:
    """Seeded weights of one layer.

    w_offsets (heads, 2P, D) and w_attn (heads, P, D) map a query to its pixel-unit
    sampling offsets and attention logits per head.
    """

    w_offsets: Tensor
    w_attn: Tensor
    w_out: Tensor
    w_ffn: Tensor
    b_ffn: Tensor

    @classmethod
    def random(cls, rng: Rng, cfg: DecoderConfig) -> "DecoderLayerWeights":
        d, p, heads = cfg.depth, cfg.points, cfg.heads
        scale = 1.0 / np.sqrt(d)
        return cls(
            w_offsets=rng.uniform((heads, 2 * p, d), -scale, scale),
            w_attn=rng.uniform((heads, p, d), -scale, scale),
            w_out=rng.uniform((d, d), -scale, scale),
            w_ffn=rng.uniform((d, d), -scale, scale),
            b_ffn=rng.uniform((d,), -0.1, 0.1),
        )


@dataclass
class DecoderResult:
    outputs: List[Tensor]
    report: pd.DataFrame
    layer_counts: List[MacCounter] = field(default_factory=list)


def init_queries(e_mixed: EmbeddingSeq, w_q: ArrayLike) -> QuerySet:
    """Q_dec = E_mixed W'_Q^T; each query's score is the normalised mixed heat of its cell."""
    w = np.asarray(w_q, dtype=np.float64)
    check_shape("W'_Q", w, (w.shape[0], e_mixed.depth))
    queries = linear_map(w, None, e_mixed.tokens)
    return QuerySet(
        queries=queries,
        scores=normalize_heatmap(e_mixed.heat),
        cells=np.arange(e_mixed.tokens.shape[0]),
        grid=e_mixed.grid,
    )


def suppress_queries(
    qs: QuerySet,
    tau: float,
    top_m: int = DEFAULT_TOP_M,
    mode: Reweight = "hard",
) -> QuerySet:
    """Keep queries scoring strictly above tau, then the top_m by score.

    Ties go to the lower flat cell index; the result is sorted by descending score.
    In "soft" mode no threshold is applied (low scores are damped later inside the
    attention instead) and only the top_m cut remains.

    Raises:
        NoHotQueriesError: If no query scores above tau in "hard" mode.
    """
    if top_m < 1:
        raise DomainError(f"top_m must be at least 1, got {top_m}")
    if mode not in REWEIGHT_MODES:
        raise DomainError(f"mode must be one of {REWEIGHT_MODES}, got {mode}")
    scores = np.asarray(qs.scores, dtype=np.float64)
    order = np.lexsort((qs.cells, -scores))
    if mode == "hard":
        order = order[scores[order] > tau]
        if order.size == 0:
            raise NoHotQueriesError(tau, float(scores.max()) if scores.size else None)
    keep = order[:top_m]
    logger.debug(f"kept {keep.size} of {len(qs)} queries")
    return QuerySet(
        queries=as_tensor(np.asarray(qs.queries)[keep]),
        scores=as_tensor(scores[keep]),
        cells=np.asarray(qs.cells)[keep],
        grid=qs.grid,
    )


def _check_distribution(weights: np.ndarray) -> None:
    if np.any(weights < 0) or np.any(np.abs(weights.sum(axis=-1) - 1.0) > WEIGHT_SUM_TOLERANCE):
        raise DomainError("attention weights must be nonnegative and sum to 1 per query")


def deform_attention(
    qs: QuerySet,
    v_enc: ArrayLike,
    params: DeformAttnParams,
    counter: Optional[MacCounter] = None,
) -> Tensor:
    """out(m) = sum_p w(m, p) * V(ref(m) + offset(m, p)), V sampled bilinearly.

    Args:
        qs (QuerySet): Queries; fixes M and the encoder grid (H, W).
        v_enc (ArrayLike): Encoder values (H * W, D), row-major over the grid.
        params (DeformAttnParams): Sampling geometry and weights.
        counter (MacCounter, optional): Charged for sampling and weighting.

    Raises:
        DomainError: If the weights are not a distribution within 1e-4.

    Returns:
        Tensor: Attended values (M, D).
    """
    height, width = qs.grid
    values = np.asarray(v_enc, dtype=np.float64)
    check_rank("V_enc", values, 2)
    check_shape("V_enc", values, (height * width, values.shape[1]))
    check_shape("reference points", params.ref_points, (len(qs), 2))
    weights = np.asarray(params.attn_weights, dtype=np.float64)
    _check_distribution(weights)

    xs, ys = params.pixel_positions(qs.grid)
    samples = bilinear_gather(values.reshape(height, width, -1), xs, ys, counter)
    if counter is not None:
        counter.add("weighting", samples.size)
    return as_tensor(np.einsum("mp,mpd->md", weights, samples), "deformable attention output")


def _head_params(
    qs: QuerySet,
    queries: np.ndarray,
    layer: DecoderLayerWeights,
    head: int,
    cfg: DecoderConfig,
    k_head: np.ndarray,
    counter: MacCounter,
) -> DeformAttnParams:
    height, width = qs.grid
    refs = qs.reference_points()
    pixel_offsets = np.asarray(linear_map(layer.w_offsets[head], None, queries, counter), dtype=np.float64)
    pixel_offsets = pixel_offsets.reshape(len(qs), cfg.points, 2)
    offsets = pixel_offsets / np.array([max(width - 1, 1), max(height - 1, 1)], dtype=np.float64)

    if cfg.reweight == "hard":
        logits = np.asarray(linear_map(layer.w_attn[head], None, queries, counter), dtype=np.float64)
    else:
        # soft: key affinity at each sampling point, scaled by the query's heat score
        xs, ys = _to_pixels(refs, offsets, qs.grid)
        keys = bilinear_gather(k_head.reshape(height, width, -1), xs, ys, counter)
        q_head = queries[:, head * cfg.head_depth:(head + 1) * cfg.head_depth]
        logits = np.einsum("md,mpd->mp", q_head, keys) / np.sqrt(cfg.head_depth)
        counter.add("key_affinity", keys.size)
        logits = logits * np.asarray(qs.scores, dtype=np.float64)[:, None]
    return DeformAttnParams(
        points=cfg.points,
        ref_points=refs,
        offsets=as_tensor(offsets),
        attn_weights=as_tensor(stable_softmax(logits)),
    )


def decoder_layer(
    cfg: DecoderConfig,
    qs: QuerySet,
    k_enc: ArrayLike,
    v_enc: ArrayLike,
    layer: DecoderLayerWeights,
    counter: Optional[MacCounter] = None,
) -> Tensor:
    """One multi-head deformable attention layer with residual and position-wise linear."""
    counter = MacCounter() if counter is None else counter
    queries = np.asarray(qs.queries, dtype=np.float64)
    keys = np.asarray(k_enc, dtype=np.float64)
    values = np.asarray(v_enc, dtype=np.float64)
    check_shape("K_enc", keys, values.shape)
    if values.shape[1] != cfg.depth or queries.shape[1] != cfg.depth:
        raise ShapeError("decoder depth", (len(qs), cfg.depth), queries.shape)

    heads_out = []
    for head in range(cfg.heads):
        cols = slice(head * cfg.head_depth, (head + 1) * cfg.head_depth)
        params = _head_params(qs, queries, layer, head, cfg, keys[:, cols], counter)
        heads_out.append(np.asarray(deform_attention(qs, values[:, cols], params, counter), dtype=np.float64))
    attended = np.concatenate(heads_out, axis=1)

    x = queries + np.asarray(linear_map(layer.w_out, None, attended, counter), dtype=np.float64)
    y = x + np.asarray(linear_map(layer.w_ffn, layer.b_ffn, x, counter), dtype=np.float64)
    return as_tensor(y, "decoder layer output")


def layer_macs(cfg: DecoderConfig, n_queries: int, n_tokens: int = 0) -> int:
    """Closed-form multiply-accumulates of one decoder layer.

    With M queries, depth D, P points and h heads:

        hard: 3 h M D P + 5 M P D + 2 M D^2
        soft: 2 h M D P + 10 M P D + 2 M D^2

    (offset and logit projections, 4 MACs per bilinear sample and channel, the
    weighted sum, the output projection and the position-wise linear). Deformable
    sampling makes the cost independent of the encoder token count N, which is
    accepted only for signature symmetry.
    """
    m, d, p, h = n_queries, cfg.depth, cfg.points, cfg.heads
    if cfg.reweight == "hard":
        return 3 * h * m * d * p + 5 * m * p * d + 2 * m * d * d
    return 2 * h * m * d * p + 10 * m * p * d + 2 * m * d * d


def layer_params(cfg: DecoderConfig) -> int:
    """Parameter count of one decoder layer."""
    d, p, h = cfg.depth, cfg.points, cfg.heads
    projections = h * 2 * p * d + (h * p * d if cfg.reweight == "hard" else 0)
    return projections + 2 * d * d + d


def decoder_stack(
    cfg: DecoderConfig,
    qs: QuerySet,
    k_enc: ArrayLike,
    v_enc: ArrayLike,
    rng: Rng,
) -> DecoderResult:
    """Run L decoder layers, keeping every intermediate output.

    Layer l draws its weights from `rng.spawn(l)`, so the first layers of a deep
    stack are identical to those of a shallow one.

    Returns:
        DecoderResult: Outputs of layers 1..L, each (M, D), and a cost report with
            columns layer, macs, cumulative_macs, params, cumulative_params, rel_change.
    """
    outputs, counters, rows = [], [], []
    current = qs
    previous = np.asarray(qs.queries, dtype=np.float64)
    for index in range(cfg.layers):
        counter = MacCounter()
        weights = DecoderLayerWeights.random(rng.spawn(index), cfg)
        out = decoder_layer(cfg, current, k_enc, v_enc, weights, counter)
        out64 = np.asarray(out, dtype=np.float64)
        denom = np.linalg.norm(previous)
        rows.append({
            "layer": index + 1,
            "macs": counter.total,
            "params": layer_params(cfg),
            "rel_change": float(np.linalg.norm(out64 - previous) / denom) if denom > 0 else float("nan"),
        })
        outputs.append(out)
        counters.append(counter)
        previous = out64
        current = current.with_queries(out)
        logger.debug(f"decoder layer {index + 1}: {counter.total} MACs")

    report = pd.DataFrame(rows, columns=["layer", "macs", "params", "rel_change"])
    report.insert(2, "cumulative_macs", report["macs"].cumsum())
    report.insert(4, "cumulative_params", report["params"].cumsum())
    return DecoderResult(outputs=outputs, report=report, layer_counts=counters)


def ablate_decoder(
    cfg: DecoderConfig,
    qs: QuerySet,
    k_enc: ArrayLike,
    v_enc: ArrayLike,
    rng: Rng,
    layers_from: int = 1,
    layers_to: int = MAX_LAYERS,
    progress: bool = True,
) -> pd.DataFrame:
    """Decoder-depth ablation: one row per L in [layers_from, layers_to].

    Columns: layers, output_rows, output_depth, total_macs, gflops (2 MACs per FLOP
    pair, in units of 1e9), total_params, last_rel_change, matches_closed_form.
    """
    if not 1 <= layers_from <= layers_to <= MAX_LAYERS:
        raise DomainError(f"layer range must satisfy 1 <= from <= to <= {MAX_LAYERS}")
    rows = []
    for n_layers in tqdm(range(layers_from, layers_to + 1), desc="decoder ablation", disable=not progress):
        layer_cfg = DecoderConfig(
            layers=n_layers, heads=cfg.heads, points=cfg.points, depth=cfg.depth, reweight=cfg.reweight
        )
        result = decoder_stack(layer_cfg, qs, k_enc, v_enc, rng)
        total = int(result.report["macs"].sum())
        final = result.outputs[-1]
        rows.append({
            "layers": n_layers,
            "output_rows": final.shape[0],
            "output_depth": final.shape[1],
            "total_macs": total,
            "gflops": 2.0 * total / 1e9,
            "total_params": int(result.report["params"].sum()),
            "last_rel_change": float(result.report["rel_change"].iloc[-1]),
            "matches_closed_form": total == n_layers * layer_macs(layer_cfg, len(qs)),
        })
    return pd.DataFrame(rows)
