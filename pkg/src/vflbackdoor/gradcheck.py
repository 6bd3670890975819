"""Central finite-difference checks for the dense core and the split networks.

Errors are measured per parameter array as
``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)``.
Inputs whose ReLU pre-activations come within ``KINK_MARGIN`` of zero are
re-drawn, since the derivative is undefined there.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .protocol import SUM_HEAD, TRAINABLE_HEAD, build_parties, forward_logits, run_round

STEP = 1e-5
TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max relative error {self.max_rel_error:.2e}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(f: Callable[[], float], param: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = param[i]
        param[i] = orig + step
        up = f()
        param[i] = orig - step
        down = f()
        param[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad


def _near_kink(layers, x) -> bool:
    a = x
    for layer in layers:
        z = a @ layer.weights + layer.bias
        if layer.activation == nn.RELU and np.abs(z).min() < KINK_MARGIN:
            return True
        a = nn.dense_forward(layer, a)
    return False


def check_layer(rng: np.random.Generator, name: str = "layer") -> CheckResult:
    """One random dense layer against the scalar ``sum(out * R)``."""
    n, d_in, d_out = (int(v) for v in rng.integers(1, 8, size=3))
    act = nn.ACTIVATIONS[int(rng.integers(len(nn.ACTIVATIONS)))]
    layer = nn.init_dense(d_in, d_out, rng, act)
    layer.bias = rng.normal(0, 0.1, d_out)
    x = rng.normal(size=(n, d_in))
    while _near_kink([layer], x):
        x = rng.normal(size=(n, d_in))
    r = rng.normal(size=(n, d_out))

    def f():
        return float(np.sum(nn.dense_forward(layer, x) * r))

    grads, grad_x = nn.dense_backward(layer, x, r)
    err = max(rel_error(grads.weights, numeric_grad(f, layer.weights)),
              rel_error(grads.bias, numeric_grad(f, layer.bias)),
              rel_error(grad_x, numeric_grad(f, x)))
    return CheckResult(f"{name} ({act}, {d_in}->{d_out}, batch {n})", err)


def check_softmax_ce(rng: np.random.Generator) -> CheckResult:
    n, c = 6, 5
    logits = rng.normal(size=(n, c)) * 3
    labels = rng.integers(0, c, n)
    _, rows = nn.softmax_ce_grad(logits, labels)
    num = numeric_grad(lambda: nn.softmax_ce_grad(logits, labels)[0], logits)
    return CheckResult("softmax cross-entropy", rel_error(rows / n, num))


def _network(head: str, rng: np.random.Generator):
    n, widths, classes = 8, (4, 3), 3
    while True:
        blocks = [rng.normal(size=(n, w)) for w in widths]
        labels = rng.integers(0, classes, n)
        parties, active = build_parties(blocks, labels, classes, head, rng, hidden=5,
                                        optimizer=nn.SgdState(1.0))
        for layers in [p.layers for p in parties] + [active.head_layers]:
            for layer in layers:
                layer.bias = rng.normal(0, 0.1, layer.out_dim)
        reps = [p.forward(b)[0] for p, b in zip(parties, blocks)]
        kinks = any(_near_kink(p.layers, b) for p, b in zip(parties, blocks))
        if active.trainable:
            kinks = kinks or _near_kink(active.head_layers, np.concatenate(reps, axis=1))
        if not kinks:
            return blocks, labels, parties, active


def check_network(head: str, rng: np.random.Generator) -> CheckResult:
    """Two-party network: gradients applied by one protocol round versus the loss.

    With learning rate 1 the parameter change of a round is exactly minus the
    gradient of the batch-mean loss.
    """
    blocks, labels, parties, active = _network(head, rng)
    idx = np.arange(len(labels))

    def f():
        logits = forward_logits(parties, active, blocks)
        return nn.softmax_ce_grad(logits, labels)[0]

    numeric = []
    for layers in [p.layers for p in parties] + [active.head_layers]:
        for layer in layers:
            numeric += [numeric_grad(f, layer.weights), numeric_grad(f, layer.bias)]

    before_p, before_a = copy.deepcopy(parties), copy.deepcopy(active)
    run_round(parties, active, idx)
    err = 0.0
    pairs = [(b.layers, a.layers) for b, a in zip(before_p, parties)]
    pairs.append((before_a.head_layers, active.head_layers))
    k = 0
    for old_layers, new_layers in pairs:
        for old, new in zip(old_layers, new_layers):
            err = max(err, rel_error(old.weights - new.weights, numeric[k]),
                      rel_error(old.bias - new.bias, numeric[k + 1]))
            k += 2
    return CheckResult(f"two-party network, {head} head", err)


def run_suite(seed: int = 0, n_layers: int = 10) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [check_layer(rng, f"layer {i + 1}") for i in range(n_layers)]
    results.append(check_softmax_ce(rng))
    results.append(check_network(SUM_HEAD, rng))
    results.append(check_network(TRAINABLE_HEAD, rng))
    return results


def main(seed: int = 0, out=print) -> bool:
    t0 = time.perf_counter()
    results = run_suite(seed)
    for r in results:
        out(r.line())
    ok = all(r.passed for r in results)
    out(f"{'PASS' if ok else 'FAIL'} gradcheck: {sum(r.passed for r in results)}/{len(results)} "
        f"checks in {time.perf_counter() - t0:.2f}s")
    return ok
