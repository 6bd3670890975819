"""Countermeasures the label party applies to the gradients it sends down.

Message defenses run as ``ACTIVE_DOWN`` interceptors in the fixed order
clip -> noise -> sparsify. The trainable head is structural and is selected
when the parties are built.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import streams
from .errors import ConfigError
from .protocol import Interceptor, RoundContext, Site

NOISE_KINDS = ("none", "gauss", "laplace")


@dataclass
class DefenseConfig:
    noise: str = "none"
    noise_variance: float = 0.0
    clip_norm: float | None = None
    drop_rate: float | None = None  # None disables sparsification
    trainable_head: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.noise not in NOISE_KINDS:
            raise ConfigError(f"noise must be one of {NOISE_KINDS}, got {self.noise!r}")
        if self.noise_variance < 0:
            raise ConfigError("noise variance must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip norm must be positive")
        if self.drop_rate is not None and not 0 <= self.drop_rate < 1:
            raise ConfigError("drop rate must lie in [0, 1)")


def clip_rows(down: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale rows whose L2 norm exceeds ``clip_norm`` back onto the ball."""
    down = np.asarray(down, dtype=np.float64)
    norms = np.linalg.norm(down, axis=1)
    over = norms > clip_norm
    if not over.any():
        return down
    out = down.copy()
    out[over] *= (clip_norm / norms[over])[:, None]
    return out


def noise_draw(kind: str, variance: float):
    if kind == "gauss":
        std = math.sqrt(variance)
        return lambda rng, w: rng.normal(0.0, std, w)
    if kind == "laplace":
        scale = math.sqrt(variance / 2.0)  # Laplace variance is 2 b^2
        return lambda rng, w: rng.laplace(0.0, scale, w)
    raise ConfigError(f"unknown noise kind {kind!r}")


def add_noise(down: np.ndarray, kind: str, variance: float, batch_indices=None,
              seed: int = 0, round_index: int = 0) -> np.ndarray:
    """Add i.i.d. Gaussian or Laplacian noise with the given variance.

    Row ``i`` draws from a generator keyed by its sample id, so the noise
    follows the sample under row permutations.
    """
    down = np.asarray(down, dtype=np.float64)
    if kind == "none" or variance == 0:
        return down
    ids = np.arange(len(down)) if batch_indices is None else np.asarray(batch_indices)
    return down + streams.per_row(seed, round_index, ids, down.shape[1], noise_draw(kind, variance))


class ResidualStore:
    """Gradient mass held back by sparsification, one row per training sample."""

    def __init__(self, n_rows: int, width: int):
        self.residual = np.zeros((n_rows, width))

    def __getitem__(self, idx):
        return self.residual[idx]


def keep_count(drop_rate: float, entries: int) -> int:
    # guard against (1 - s) * E landing a hair above an integer
    return min(entries, math.ceil((1.0 - drop_rate) * entries - 1e-9))


def sparsify(down: np.ndarray, batch_indices, drop_rate: float,
             store: ResidualStore) -> tuple[np.ndarray, ResidualStore]:
    """Send the largest-magnitude ``ceil((1 - s) E)`` entries of gradient + residual.

    Selection is global over the batch matrix. Sent entries are cleared from
    the store; the rest is written back for later rounds.
    """
    down = np.asarray(down, dtype=np.float64)
    idx = np.asarray(batch_indices, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ConfigError("sparsify needs unique sample ids per batch")
    candidate = down + store.residual[idx]
    k = keep_count(drop_rate, candidate.size)
    flat = np.abs(candidate).ravel()
    mask = np.zeros(candidate.size, dtype=bool)
    if k >= candidate.size:
        mask[:] = True
    elif k > 0:
        mask[np.argpartition(-flat, k - 1)[:k]] = True
    mask = mask.reshape(candidate.shape)
    sent = np.where(mask, candidate, 0.0)
    store.residual[idx] = np.where(mask, 0.0, candidate)
    return sent, store


# Interceptors -------------------------------------------------------------

class ClipDefense(Interceptor):
    site = Site.ACTIVE_DOWN
    name = "clip"

    def __init__(self, clip_norm: float):
        self.clip_norm = clip_norm

    def transform(self, message, ctx: RoundContext):
        return clip_rows(message, self.clip_norm)


class NoiseDefense(Interceptor):
    site = Site.ACTIVE_DOWN
    name = "noise"

    def __init__(self, kind: str, variance: float, seed: int = 0):
        self.kind, self.variance, self.seed = kind, variance, seed

    def transform(self, message, ctx: RoundContext):
        return add_noise(message, self.kind, self.variance, ctx.batch_indices,
                         self.seed, ctx.round_index)


class SparsifyDefense(Interceptor):
    site = Site.ACTIVE_DOWN
    name = "sparsify"

    def __init__(self, drop_rate: float, n_rows: int):
        self.drop_rate = drop_rate
        self.n_rows = n_rows
        self.stores: dict[int, ResidualStore] = {}

    def transform(self, message, ctx: RoundContext):
        store = self.stores.get(ctx.party)
        if store is None:
            store = self.stores[ctx.party] = ResidualStore(self.n_rows, message.shape[1])
        sent, _ = sparsify(message, ctx.batch_indices, self.drop_rate, store)
        return sent


def build_defenses(cfg: DefenseConfig, n_rows: int) -> list[Interceptor]:
    stack: list[Interceptor] = []
    if cfg.clip_norm is not None:
        stack.append(ClipDefense(cfg.clip_norm))
    if cfg.noise != "none" and cfg.noise_variance > 0:
        stack.append(NoiseDefense(cfg.noise, cfg.noise_variance, cfg.seed))
    if cfg.drop_rate is not None:
        stack.append(SparsifyDefense(cfg.drop_rate, n_rows))
    return stack
