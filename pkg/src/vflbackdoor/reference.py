"""Monolithic end-to-end trainer used as an oracle for the split protocol.

The whole network (all feature branches plus the merge) is treated as one
model on the concatenated feature matrix and trained with ordinary backprop on
the batch-mean loss. Nothing here goes through messages or interceptors, and
the math is written out directly rather than reusing the protocol's helpers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn


def _layer_fwd(w, b, act, x):
    z = x @ w + b
    return (np.where(z > 0, z, 0.0) if act == nn.RELU else z), z


@dataclass
class MonolithicNet:
    branches: list[list[nn.DenseLayer]]
    columns: list[slice]  # feature columns owned by each branch
    head: list[nn.DenseLayer] = field(default_factory=list)  # empty -> sum merge
    learning_rate: float = 0.01

    @classmethod
    def from_protocol(cls, parties, active, learning_rate: float | None = None) -> "MonolithicNet":
        """Deep-copy the parameters of a protocol setup into a monolithic model."""
        cols, start = [], 0
        for p in parties:
            cols.append(slice(start, start + p.features.shape[1]))
            start += p.features.shape[1]
        lr = learning_rate if learning_rate is not None else parties[0].optimizer.learning_rate
        return cls([[l.copy() for l in p.layers] for p in parties], cols,
                   [l.copy() for l in active.head_layers], lr)

    def _forward(self, x):
        caches = []
        outs = []
        for layers, cols in zip(self.branches, self.columns):
            a = x[:, cols]
            cache = []
            for layer in layers:
                out, z = _layer_fwd(layer.weights, layer.bias, layer.activation, a)
                cache.append((a, z))
                a = out
            caches.append(cache)
            outs.append(a)
        head_cache = []
        if self.head:
            a = np.hstack(outs)
            for layer in self.head:
                out, z = _layer_fwd(layer.weights, layer.bias, layer.activation, a)
                head_cache.append((a, z))
                a = out
            logits = a
        else:
            logits = np.sum(outs, axis=0)
        return logits, outs, caches, head_cache

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(np.asarray(x, dtype=np.float64))[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def loss(self, x, y) -> float:
        logits = self.logits(x)
        m = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
        return float(np.mean(lse - logits[np.arange(len(y)), y]))

    def train_step(self, x: np.ndarray, y: np.ndarray) -> None:
        """One SGD step on the batch-mean cross-entropy."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        logits, outs, caches, head_cache = self._forward(x)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        d = e / e.sum(axis=1, keepdims=True)
        d[np.arange(n), y] -= 1.0
        d /= n

        updates = []
        if self.head:
            for layer, (a, z) in zip(reversed(self.head), reversed(head_cache)):
                if layer.activation == nn.RELU:
                    d = d * (z > 0)
                updates.append((layer, a.T @ d, d.sum(axis=0)))
                d = d @ layer.weights.T
            widths = [o.shape[1] for o in outs]
            offsets = np.cumsum([0] + widths)
            branch_grads = [d[:, lo:hi] for lo, hi in zip(offsets[:-1], offsets[1:])]
        else:
            branch_grads = [d] * len(self.branches)

        for layers, cache, g in zip(self.branches, caches, branch_grads):
            for layer, (a, z) in zip(reversed(layers), reversed(cache)):
                if layer.activation == nn.RELU:
                    g = g * (z > 0)
                updates.append((layer, a.T @ g, g.sum(axis=0)))
                g = g @ layer.weights.T

        for layer, gw, gb in updates:
            layer.weights = layer.weights - self.learning_rate * gw
            layer.bias = layer.bias - self.learning_rate * gb

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layers in self.branches:
            for l in layers:
                params += [l.weights, l.bias]
        for l in self.head:
            params += [l.weights, l.bias]
        return params


def protocol_parameters(parties, active) -> list[np.ndarray]:
    """Flatten protocol parameters in the same order as :meth:`MonolithicNet.parameters`."""
    params = []
    for p in parties:
        for l in p.layers:
            params += [l.weights, l.bias]
    for l in active.head_layers:
        params += [l.weights, l.bias]
    return params
