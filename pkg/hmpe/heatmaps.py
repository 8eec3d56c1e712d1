"""
Gradient-weighted heatmaps over an activation tensor A of shape (K, H, W).

    alpha[k, i, j] = d2y/dA^2 + d3y/dA^3           (same-element partials)
    beta[k]        = sum_ij alpha * ReLU(dy/dA)
    H_class        = ReLU(sum_k beta[k] * A[k])
    H_bbox         = same pipeline with L_reg in place of y
    H_mixed        = lam * H_class + (1 - lam) * H_bbox
"""
from dataclasses import dataclass
from typing import List, Literal, Sequence

import numpy as np

from hmpe import logger
from hmpe.heads import BboxHead, BoxTarget, ClassHead, class_partials, reg_partials
from hmpe.utils.errors import DomainError
from hmpe.utils.numerics import ArrayLike, Tensor, as_tensor, check_rank, check_shape

BboxGradOrder = Literal["1", "mixed"]
BBOX_GRAD_ORDERS = ("1", "mixed")
DEFAULT_LAMBDA = 0.5


@dataclass(frozen=True)
class GradWeights:
    """alpha (K, H, W) and the channel importances beta (K,) derived from it."""

    alpha: Tensor
    beta: Tensor


@dataclass(frozen=True)
class HeatmapTriplet:
    h_class: Tensor
    h_bbox: Tensor
    h_mixed: Tensor
    lam: float

    def as_dict(self):
        return {"h_class": self.h_class, "h_bbox": self.h_bbox, "h_mixed": self.h_mixed}

    def select(self, source: str) -> Tensor:
        """Return the map named "class", "bbox" or "mixed"."""
        try:
            return self.as_dict()[f"h_{source}"]
        except KeyError as err:
            raise DomainError(f"unknown heatmap source '{source}'") from err


def grad_weight_coeffs(head: ClassHead, activations: ArrayLike) -> Tensor:
    """alpha = second plus third same-element partials of the class score."""
    second = np.asarray(class_partials(head, activations, 2), dtype=np.float64)
    third = np.asarray(class_partials(head, activations, 3), dtype=np.float64)
    return as_tensor(second + third, "alpha")


def channel_importance(alpha: ArrayLike, grad1: ArrayLike) -> Tensor:
    """beta[k] = sum_ij alpha[k, i, j] * max(0, grad1[k, i, j])."""
    a = np.asarray(alpha, dtype=np.float64)
    g = np.asarray(grad1, dtype=np.float64)
    check_rank("alpha", a, 3)
    check_shape("first-order gradient", g, a.shape)
    return as_tensor(np.einsum("kij,kij->k", a, np.maximum(g, 0.0)), "beta")


def class_heatmap(beta: ArrayLike, activations: ArrayLike) -> Tensor:
    """ReLU of the beta-weighted channel sum of A; shape (H, W), nonnegative."""
    b = np.asarray(beta, dtype=np.float64)
    a = np.asarray(activations, dtype=np.float64)
    check_rank("activations", a, 3)
    check_shape("beta", b, (a.shape[0],))
    return as_tensor(np.maximum(np.tensordot(b, a, axes=(0, 0)), 0.0), "heatmap")


def class_grad_weights(head: ClassHead, activations: ArrayLike) -> GradWeights:
    alpha = grad_weight_coeffs(head, activations)
    beta = channel_importance(alpha, class_partials(head, activations, 1))
    return GradWeights(alpha=alpha, beta=beta)


def bbox_grad_weights(
    head: BboxHead,
    activations: ArrayLike,
    target: BoxTarget,
    grad_order: BboxGradOrder = "mixed",
) -> GradWeights:
    """alpha/beta for the box head.

    With grad_order "mixed" alpha is the second plus third partials of L_reg; with
    "1" alpha is all ones, so beta reduces to the ReLU-filtered first-order
    Huber gradients summed per channel.
    """
    if grad_order not in BBOX_GRAD_ORDERS:
        raise DomainError(f"bbox grad order must be one of {BBOX_GRAD_ORDERS}, got {grad_order}")
    grad1 = reg_partials(head, activations, target, 1)
    if grad_order == "mixed":
        alpha = as_tensor(
            np.asarray(reg_partials(head, activations, target, 2), dtype=np.float64)
            + np.asarray(reg_partials(head, activations, target, 3), dtype=np.float64),
            "alpha",
        )
    else:
        alpha = as_tensor(np.ones_like(grad1))
    return GradWeights(alpha=alpha, beta=channel_importance(alpha, grad1))


def bbox_heatmap(
    head: BboxHead,
    activations: ArrayLike,
    target: BoxTarget,
    grad_order: BboxGradOrder = "mixed",
) -> Tensor:
    """H_bbox: the class-heatmap pipeline driven by the box regression loss."""
    weights = bbox_grad_weights(head, activations, target, grad_order)
    return class_heatmap(weights.beta, activations)


def mix_heatmaps(h_class: ArrayLike, h_bbox: ArrayLike, lam: float) -> Tensor:
    """lam * h_class + (1 - lam) * h_bbox, lam in [0, 1]."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    hc = np.asarray(h_class, dtype=np.float64)
    hb = np.asarray(h_bbox, dtype=np.float64)
    check_shape("h_bbox", hb, hc.shape)
    return as_tensor(lam * hc + (1.0 - lam) * hb, "mixed heatmap")


def normalize_heatmap(h: ArrayLike) -> Tensor:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(h, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return as_tensor(np.zeros_like(values))
    return as_tensor((values - lo) / (hi - lo), "normalised heatmap")


def heatmap_triplet(
    class_head: ClassHead,
    bbox_head: BboxHead,
    activations: ArrayLike,
    target: BoxTarget,
    lam: float = DEFAULT_LAMBDA,
    bbox_grad_order: BboxGradOrder = "mixed",
    normalize: bool = True,
) -> HeatmapTriplet:
    """Compute H_class, H_bbox and their lambda-mix for one activation tensor.

    Args:
        class_head (ClassHead): Head supplying y.
        bbox_head (BboxHead): Head supplying L_reg.
        activations (ArrayLike): A, shape (K, H, W).
        target (BoxTarget): Ground-truth box for L_reg.
        lam (float, optional): Mixing weight of the class map. Defaults to 0.5.
        bbox_grad_order (str, optional): "mixed" or "1". Defaults to "mixed".
        normalize (bool, optional): Min-max normalise the class and box maps before
            mixing, so lambda weighs comparable scales. Defaults to True.

    Returns:
        HeatmapTriplet: The three maps and lambda.
    """
    h_class = class_heatmap(class_grad_weights(class_head, activations).beta, activations)
    h_bbox = bbox_heatmap(bbox_head, activations, target, bbox_grad_order)
    if normalize:
        h_class, h_bbox = normalize_heatmap(h_class), normalize_heatmap(h_bbox)
    for name, h in (("class", h_class), ("bbox", h_bbox)):
        if not np.any(h > 0):
            logger.warning(f"{name} heatmap is identically zero")
    return HeatmapTriplet(
        h_class=h_class, h_bbox=h_bbox, h_mixed=mix_heatmaps(h_class, h_bbox, lam), lam=lam
    )


def heatmap_pyramid(h: ArrayLike, scales: Sequence[int]) -> List[Tensor]:
    """Average-pool a heatmap by each scale factor (scale 1 returns the map itself)."""
    values = np.asarray(h, dtype=np.float64)
    check_rank("heatmap", values, 2)
    height, width = values.shape
    pyramid = []
    for s in scales:
        if s < 1 or height % s or width % s:
            raise DomainError(f"heatmap of shape {values.shape} cannot be pooled by {s}")
        pooled = values.reshape(height // s, s, width // s, s).mean(axis=(1, 3))
        pyramid.append(as_tensor(pooled, f"heatmap at scale {s}"))
    return pyramid
