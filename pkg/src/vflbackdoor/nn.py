"""Minimal dense-network core: layers with explicit forward/backward passes and SGD.

Matrices are plain ``float64`` numpy arrays of shape ``(batch, features)``.
Every party model in the simulator is a list of :class:`DenseLayer`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ConfigError(
                f"inconsistent layer shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class LayerGrads:
    weights: np.ndarray
    bias: np.ndarray

    def scaled(self, factor: float) -> "LayerGrads":
        return LayerGrads(self.weights * factor, self.bias * factor)


@dataclass(frozen=True)
class SgdState:
    learning_rate: float = 0.01
    l2_lambda: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not self.l2_lambda >= 0:
            raise ConfigError(f"l2_lambda must be non-negative, got {self.l2_lambda}")


def init_dense(in_dim: int, out_dim: int, rng: np.random.Generator,
               activation: str = RELU) -> DenseLayer:
    """Glorot-uniform weights, zero bias."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    weights = rng.uniform(-limit, limit, size=(in_dim, out_dim))
    return DenseLayer(weights, np.zeros(out_dim), activation)


def _as_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"{name} must be a 2-D matrix, got shape {x.shape}")
    return x


def dense_forward(layer: DenseLayer, inputs: np.ndarray) -> np.ndarray:
    inputs = _as_matrix(inputs, "input")
    if inputs.shape[1] != layer.in_dim:
        raise ConfigError(
            f"input has {inputs.shape[1]} columns but layer expects {layer.in_dim}"
        )
    out = inputs @ layer.weights + layer.bias
    if layer.activation == RELU:
        np.maximum(out, 0.0, out=out)
    return out


def dense_backward(layer: DenseLayer, inputs: np.ndarray,
                   upstream_grad: np.ndarray) -> tuple[LayerGrads, np.ndarray]:
    """Chain rule through one layer.

    ``upstream_grad`` is the gradient w.r.t. the layer *output*. Returns the
    parameter gradients and the gradient w.r.t. ``inputs``. Gradients are summed
    over rows; callers that optimise a batch mean divide afterwards.
    """
    inputs = _as_matrix(inputs, "input")
    upstream_grad = _as_matrix(upstream_grad, "upstream_grad")
    expected = (inputs.shape[0], layer.out_dim)
    if inputs.shape[1] != layer.in_dim or upstream_grad.shape != expected:
        raise ConfigError(
            f"backward shape mismatch: input {inputs.shape}, upstream {upstream_grad.shape}, "
            f"layer {layer.in_dim}->{layer.out_dim}"
        )
    if layer.activation == RELU:
        pre = inputs @ layer.weights + layer.bias
        delta = upstream_grad * (pre > 0)
    else:
        delta = upstream_grad
    grads = LayerGrads(inputs.T @ delta, delta.sum(axis=0))
    return grads, delta @ layer.weights.T


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_ce_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``softmax(logits)`` and the per-sample logit gradients.

    Row ``i`` of the returned gradient is ``softmax(logits_i) - onehot(y_i)``, the
    derivative of sample ``i``'s own loss. This is the message that travels back
    to the feature parties; divide by the batch size to get the gradient of the
    returned mean loss.
    """
    logits = _as_matrix(logits, "logits")
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels must lie in [0, {num_classes})")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, labels])) if n else 0.0
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad


def sgd_step(layer: DenseLayer, grads: LayerGrads, state: SgdState) -> DenseLayer:
    """Return a new layer with ``theta - lr * (grad + lambda * theta)`` applied."""
    if grads.weights.shape != layer.weights.shape or grads.bias.shape != layer.bias.shape:
        raise ConfigError("gradient shapes do not match the layer parameters")
    lr, lam = state.learning_rate, state.l2_lambda
    if lam:
        weights = layer.weights - lr * (grads.weights + lam * layer.weights)
        bias = layer.bias - lr * (grads.bias + lam * layer.bias)
    else:
        weights = layer.weights - lr * grads.weights
        bias = layer.bias - lr * grads.bias
    return DenseLayer(weights, bias, layer.activation)


# Layer stacks -------------------------------------------------------------

def stack_forward(layers: Sequence[DenseLayer], inputs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward through a stack; also returns each layer's input for the backward pass."""
    acts = []
    out = inputs
    for layer in layers:
        acts.append(out)
        out = dense_forward(layer, out)
    return out, acts


def stack_backward(layers: Sequence[DenseLayer], acts: Sequence[np.ndarray],
                   upstream_grad: np.ndarray) -> tuple[list[LayerGrads], np.ndarray]:
    grads: list[LayerGrads] = []
    g = upstream_grad
    for layer, a in zip(reversed(layers), reversed(acts)):
        lg, g = dense_backward(layer, a, g)
        grads.append(lg)
    grads.reverse()
    return grads, g


def stack_step(layers: Sequence[DenseLayer], grads: Sequence[LayerGrads],
               state: SgdState) -> list[DenseLayer]:
    return [sgd_step(layer, g, state) for layer, g in zip(layers, grads)]
