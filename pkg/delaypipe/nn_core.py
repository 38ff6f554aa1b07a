"""
Dense-network training core with explicit gradients.

Batches are row-major: ``x`` has shape (batch, in) and a layer computes
``act(x @ W.T + b)``. All arithmetic goes through numpy with a fixed op order,
so two runs that feed the same arrays produce bit-identical results.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from delaypipe.errors import ShapeError, StaleCacheError, TrainingDivergedError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    W: Tensor
    b: Tensor
    activation: str = "relu"
    velocity_W: Optional[Tensor] = None
    velocity_b: Optional[Tensor] = None

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"Unknown activation '{self.activation}'")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"Inconsistent layer shapes W{self.W.shape} b{self.b.shape}")

    @property
    def fan_in(self) -> int:
        return self.W.shape[1]

    @property
    def fan_out(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "Layer":
        return Layer(
            self.W.copy(),
            self.b.copy(),
            self.activation,
            None if self.velocity_W is None else self.velocity_W.copy(),
            None if self.velocity_b is None else self.velocity_b.copy(),
        )


@dataclass
class ForwardCache:
    x: Tensor
    z: Tensor
    consumed: bool = False


@dataclass
class LayerGrads:
    dW: Tensor
    db: Tensor
    dX: Tensor


@dataclass
class AppliedUpdate:
    """Exactly what was added to the parameters: W(t+1) = W(t) + dW."""

    dW: Tensor
    db: Tensor


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    t_max: int = 0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"Learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"Momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"Weight decay must be nonnegative, got {self.weight_decay}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"Unknown lr schedule '{self.lr_schedule}'")
        if self.lr_schedule == "cosine" and self.t_max < 1:
            raise ValueError("Cosine schedule needs t_max >= 1")

    @property
    def is_plain(self) -> bool:
        return self.momentum == 0 and self.weight_decay == 0

    def lr_at(self, t: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        t = min(max(t, 0), self.t_max)
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * t / self.t_max))


def forward(layer: Layer, x: Tensor, weights: Optional[Tensor] = None, bias: Optional[Tensor] = None) -> Tuple[Tensor, ForwardCache]:
    W = layer.W if weights is None else weights
    b = layer.b if bias is None else bias
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"Input shape {x.shape} does not match weights {W.shape}")
    z = x @ W.T + b
    y = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return y, ForwardCache(x, z)


def backward(layer: Layer, cache: ForwardCache, dY: Tensor, weights: Optional[Tensor] = None) -> LayerGrads:
    """Chain-rule gradients; ``weights`` is the version used to propagate dX upstream."""
    if cache.consumed:
        raise StaleCacheError("Forward cache was already consumed by a backward pass")
    W = layer.W if weights is None else weights
    if dY.shape != cache.z.shape:
        raise ShapeError(f"Output gradient shape {dY.shape} does not match cache {cache.z.shape}")
    if cache.x.shape[1] != W.shape[1] or cache.z.shape[1] != W.shape[0]:
        raise StaleCacheError(f"Cache shapes x{cache.x.shape} z{cache.z.shape} do not match weights {W.shape}")
    dZ = dY * (cache.z > 0) if layer.activation == "relu" else dY
    cache.consumed = True
    return LayerGrads(dZ.T @ cache.x, dZ.sum(axis=0), dZ @ W)


def softmax_ce(logits: Tensor, labels: Sequence[int]) -> Tuple[float, Tensor]:
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"Expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"Label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = exp / total
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def sgd_step(layer: Layer, grads: LayerGrads, cfg: SgdConfig, t: int) -> Tuple[Layer, AppliedUpdate]:
    """In-place SGD step; momentum follows the heavy-ball form v = mu*v + g."""
    lr = cfg.lr_at(t)
    gW, gb = grads.dW, grads.db
    if cfg.weight_decay:
        gW = gW + cfg.weight_decay * layer.W
        gb = gb + cfg.weight_decay * layer.b
    if cfg.momentum:
        if layer.velocity_W is None:
            vW, vb = gW.copy(), gb.copy()
        else:
            vW = cfg.momentum * layer.velocity_W + gW
            vb = cfg.momentum * layer.velocity_b + gb
        gW, gb = vW, vb
    update = AppliedUpdate(-(lr * gW), -(lr * gb))
    if not (np.isfinite(update.dW).all() and np.isfinite(update.db).all()):
        raise TrainingDivergedError(f"Non-finite update at iteration {t}")
    if cfg.momentum:
        layer.velocity_W, layer.velocity_b = vW, vb
    layer.W = layer.W + update.dW
    layer.b = layer.b + update.db
    return layer, update


@dataclass
class Mlp:
    layers: List[Layer] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def sizes(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    def copy(self) -> "Mlp":
        return Mlp([layer.copy() for layer in self.layers])

    def weight_bytes(self) -> List[int]:
        return [layer.W.nbytes for layer in self.layers]


def init_mlp(sizes: Sequence[int], seed: int, dtype=np.float64) -> Mlp:
    """He-initialized MLP; the last layer is linear."""
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ShapeError(f"Layer sizes must list at least input and output width, got {list(sizes)}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in)).astype(dtype)
        activation = "identity" if i == len(sizes) - 2 else "relu"
        layers.append(Layer(W, np.zeros(fan_out, dtype=dtype), activation))
    return Mlp(layers)


def predict(mlp: Mlp, x: Tensor) -> Tensor:
    for layer in mlp.layers:
        x, _ = forward(layer, x)
    return x


def accuracy(mlp: Mlp, x: Tensor, y: Tensor) -> float:
    if len(y) == 0:
        return 0.0
    return float((predict(mlp, x).argmax(axis=1) == y).mean())


def loss_and_grads(mlp: Mlp, x: Tensor, y: Tensor) -> Tuple[float, List[LayerGrads]]:
    caches = []
    h = x
    for layer in mlp.layers:
        h, cache = forward(layer, h)
        caches.append(cache)
    loss, d = softmax_ce(h, y)
    grads: List[Optional[LayerGrads]] = [None] * mlp.num_layers
    for l in reversed(range(mlp.num_layers)):
        grads[l] = backward(mlp.layers[l], caches[l], d)
        d = grads[l].dX
    return loss, grads


def numerical_gradient(f: Callable[[], float], param: Tensor, eps: float = 1e-5) -> Tensor:
    """Central differences of ``f`` with respect to ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + eps
        plus = f()
        param[idx] = orig - eps
        minus = f()
        param[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def relative_error(a: Tensor, b: Tensor) -> float:
    denom = max(float(np.linalg.norm(a) + np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def grad_check(mlp: Mlp, x: Tensor, y: Tensor, eps: float = 1e-5) -> Dict[str, float]:
    """Relative error of every analytic gradient against central differences."""
    _, grads = loss_and_grads(mlp, x, y)

    def loss() -> float:
        return softmax_ce(predict(mlp, x), y)[0]

    errors = {}
    for l, (layer, g) in enumerate(zip(mlp.layers, grads)):
        errors[f"W{l}"] = relative_error(g.dW, numerical_gradient(loss, layer.W, eps))
        errors[f"b{l}"] = relative_error(g.db, numerical_gradient(loss, layer.b, eps))
    x = x.copy()
    d_input = _input_gradient(mlp, x, y)
    errors["x"] = relative_error(d_input, numerical_gradient(lambda: softmax_ce(predict(mlp, x), y)[0], x, eps))
    logger.debug(f"Gradient check errors: {errors}")
    return errors


def _input_gradient(mlp: Mlp, x: Tensor, y: Tensor) -> Tensor:
    _, grads = loss_and_grads(mlp, x, y)
    return grads[0].dX
