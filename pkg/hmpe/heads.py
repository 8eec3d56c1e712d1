"""
Toy differentiable detection heads.

A classification head scores an activation tensor A (K, H, W) with
y = tanh(<w, A> + b); a box head predicts (cx, cy, w, h) = sigmoid(W A + b) and is
scored against a target with a Huber loss. Both expose closed-form same-element
partials of order 1, 2 and 3 with respect to A, which is everything the heatmap
construction needs.

The classification nonlinearity is tanh rather than ReLU on purpose: a ReLU head
has zero second and third partials almost everywhere.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from hmpe.utils.errors import DomainError, FormatError
from hmpe.utils.numerics import ArrayLike, Rng, Tensor, as_tensor, check_shape
from hmpe.utils.tensor_io import PathLike, read_sidecar, read_tensor, write_sidecar, write_tensor

ORDERS = (1, 2, 3)
DEFAULT_HUBER_DELTA = 1.0


def _check_order(order: int) -> None:
    if order not in ORDERS:
        raise DomainError(f"derivative order must be 1, 2 or 3, got {order}")


def _sidecar_path(weights_path: PathLike) -> Path:
    return Path(weights_path).with_suffix(".txt")


@dataclass(frozen=True)
class BoxTarget:
    """Ground-truth box in normalised image units."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"box {name}={value} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise DomainError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def parse(cls, text: str) -> "BoxTarget":
        """Build a box from a "cx,cy,w,h" string."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 4:
            raise DomainError(f"box target needs 4 comma-separated values, got '{text}'")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError as err:
            raise DomainError(f"box target '{text}' is not numeric") from err

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def __str__(self) -> str:
        return f"{self.cx},{self.cy},{self.w},{self.h}"


@dataclass(frozen=True)
class ClassHead:
    """y = tanh(<weights, A> + bias) for activations A shaped like `weights`."""

    weights: Tensor
    bias: float = 0.0

    @classmethod
    def random(cls, rng: Rng, shape: Tuple[int, int, int], scale: float = 0.35) -> "ClassHead":
        """Seeded head with weights uniform in [-scale, scale] and bias in [-0.5, 0.5]."""
        weights = rng.uniform(shape, -scale, scale)
        bias = float(rng.uniform((1,), -0.5, 0.5)[0])
        return cls(weights=weights, bias=bias)

    @classmethod
    def calibrated(
        cls,
        rng: Rng,
        activations: ArrayLike,
        preactivation: float = -0.5,
        scale: float = 0.25,
    ) -> "ClassHead":
        """Seeded head with nonnegative weights, biased so that s hits `preactivation`.

        At s = -0.5 both tanh'' and tanh' are positive and |tanh'''| is small enough
        that alpha > 0 for any weight below 1, so beta is positive in every channel.
        """
        a = np.asarray(activations, dtype=np.float64)
        weights = rng.uniform(a.shape, 0.0, scale)
        bias = preactivation - float(np.sum(np.asarray(weights, dtype=np.float64) * a))
        return cls(weights=weights, bias=bias)

    def save(self, path: PathLike) -> None:
        write_tensor(path, self.weights)
        write_sidecar(_sidecar_path(path), {"bias": float(self.bias)})

    @classmethod
    def load(cls, path: PathLike) -> "ClassHead":
        values = read_sidecar(_sidecar_path(path))
        try:
            bias = float(values.get("bias", 0.0))
        except ValueError as err:
            raise FormatError(f"class head bias in {path} is not numeric") from err
        return cls(weights=read_tensor(path), bias=bias)


@dataclass(frozen=True)
class BboxHead:
    """(cx, cy, w, h) = sigmoid(<weights[i], A> + bias[i]), scored with Huber(delta)."""

    weights: Tensor
    bias: Tensor
    delta: float = DEFAULT_HUBER_DELTA

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[0] != 4:
            raise DomainError(f"box head weights must be (4, K, H, W), got {self.weights.shape}")
        check_shape("box head bias", np.asarray(self.bias), (4,))
        if not self.delta > 0:
            raise DomainError(f"Huber delta must be positive, got {self.delta}")

    @classmethod
    def random(
        cls,
        rng: Rng,
        shape: Tuple[int, int, int],
        delta: float = DEFAULT_HUBER_DELTA,
        scale: float = 0.35,
    ) -> "BboxHead":
        weights = rng.uniform((4,) + tuple(shape), -scale, scale)
        bias = rng.uniform((4,), -0.5, 0.5)
        return cls(weights=weights, bias=bias, delta=delta)

    @classmethod
    def calibrated(
        cls,
        rng: Rng,
        activations: ArrayLike,
        target: BoxTarget,
        delta: float = DEFAULT_HUBER_DELTA,
        margin: float = 0.05,
        scale: float = 0.25,
    ) -> "BboxHead":
        """Seeded head with nonnegative weights whose prediction overshoots `target` by `margin`.

        A small positive residual keeps every Huber gradient positive, so the box
        heatmap lights up where the activations do.
        """
        a = np.asarray(activations, dtype=np.float64)
        weights = rng.uniform((4,) + a.shape, 0.0, scale)
        pred = np.clip(target.as_array() + margin, 0.05, 0.95)
        logits = np.log(pred / (1.0 - pred))
        z = np.asarray(weights, dtype=np.float64).reshape(4, -1) @ a.reshape(-1)
        return cls(weights=weights, bias=as_tensor(logits - z), delta=delta)

    def save(self, path: PathLike) -> None:
        write_tensor(path, self.weights)
        write_sidecar(
            _sidecar_path(path),
            {"bias": [float(b) for b in self.bias], "delta": float(self.delta)},
        )

    @classmethod
    def load(cls, path: PathLike) -> "BboxHead":
        values = read_sidecar(_sidecar_path(path))
        try:
            bias = [float(b) for b in values["bias"].split(",")]
            delta = float(values.get("delta", DEFAULT_HUBER_DELTA))
        except (KeyError, ValueError) as err:
            raise FormatError(f"box head sidecar for {path} needs bias=b0,b1,b2,b3") from err
        return cls(weights=read_tensor(path), bias=as_tensor(bias), delta=delta)


def _preactivation(head: ClassHead, activations: ArrayLike) -> float:
    w = np.asarray(head.weights, dtype=np.float64)
    a = np.asarray(activations, dtype=np.float64)
    check_shape("class head activations", a, w.shape)
    return float(np.sum(w * a) + head.bias)


def tanh_derivatives(s: float) -> Tuple[float, float, float]:
    """First three derivatives of tanh at `s`."""
    t = np.tanh(s)
    d1 = 1.0 - t * t
    return d1, -2.0 * t * d1, -2.0 * d1 * (1.0 - 3.0 * t * t)


def class_score(head: ClassHead, activations: ArrayLike) -> float:
    """Confidence y = tanh(<w, A> + b), always inside (-1, 1)."""
    return float(np.tanh(_preactivation(head, activations)))


def class_partials(head: ClassHead, activations: ArrayLike, order: int) -> Tensor:
    """Same-element partials d^n y / dA_e^n = tanh^(n)(s) * w_e^n.

    Args:
        head (ClassHead): The scoring head.
        activations (ArrayLike): A, shaped like the head weights.
        order (int): 1, 2 or 3.

    Returns:
        Tensor: Partials shaped like A.
    """
    _check_order(order)
    s = _preactivation(head, activations)
    w = np.asarray(head.weights, dtype=np.float64)
    return as_tensor(tanh_derivatives(s)[order - 1] * w ** order, "class partials")


def huber(residual: float, delta: float) -> float:
    """0.5 r^2 for |r| <= delta, delta * (|r| - delta / 2) beyond."""
    if not delta > 0:
        raise DomainError(f"Huber delta must be positive, got {delta}")
    r = abs(float(residual))
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


def huber_grad(residual: float, delta: float) -> float:
    """Huber derivative: the residual clipped to [-delta, delta]."""
    if not delta > 0:
        raise DomainError(f"Huber delta must be positive, got {delta}")
    return float(np.clip(residual, -delta, delta))


def _box_forward(head: BboxHead, activations: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    w = np.asarray(head.weights, dtype=np.float64)
    a = np.asarray(activations, dtype=np.float64)
    check_shape("box head activations", a, w.shape[1:])
    z = w.reshape(4, -1) @ a.reshape(-1) + np.asarray(head.bias, dtype=np.float64)
    return w, 1.0 / (1.0 + np.exp(-z))


def predict_box(head: BboxHead, activations: ArrayLike) -> np.ndarray:
    """Predicted (cx, cy, w, h), each in (0, 1)."""
    return _box_forward(head, activations)[1]


def reg_loss(head: BboxHead, activations: ArrayLike, target: BoxTarget) -> float:
    """L_reg = sum over the 4 coordinates of Huber(pred - target)."""
    _, pred = _box_forward(head, activations)
    residuals = pred - target.as_array()
    return float(sum(huber(r, head.delta) for r in residuals))


def reg_partials(head: BboxHead, activations: ArrayLike, target: BoxTarget, order: int) -> Tensor:
    """Same-element partials of L_reg with respect to A, order 1, 2 or 3.

    Chain rule through sigmoid and Huber per coordinate i, with sigma^(n) the sigmoid
    derivatives at z_i and h', h'' the Huber derivatives at the residual (h''' = 0):

        f'   = h' s1
        f''  = h'' s1^2 + h' s2
        f''' = 3 h'' s1 s2 + h' s3

    and the partial for element e is sum_i f^(n)_i * W[i, e]^n.
    """
    _check_order(order)
    w, pred = _box_forward(head, activations)
    residuals = pred - target.as_array()
    h1 = np.clip(residuals, -head.delta, head.delta)
    h2 = (np.abs(residuals) <= head.delta).astype(np.float64)

    s1 = pred * (1.0 - pred)
    s2 = s1 * (1.0 - 2.0 * pred)
    s3 = s1 * (1.0 - 6.0 * pred + 6.0 * pred * pred)
    per_coord = {
        1: h1 * s1,
        2: h2 * s1 * s1 + h1 * s2,
        3: 3.0 * h2 * s1 * s2 + h1 * s3,
    }[order]
    partials = np.tensordot(per_coord, w ** order, axes=(0, 0))
    return as_tensor(partials, "box partials")
