"""Backdoor behaviours of a malicious feature party.

All attacks act on messages only: the intermediate gradients the party
receives (and trains on) and the representations it sends up.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import streams
from .errors import ConfigError
from .protocol import Interceptor, RoundContext, Site

INFERENCE_FAILED = -1


@dataclass
class AttackConfig:
    malicious_party: int = 1
    target_label: int = 0
    amplify_ratio: float = 10.0
    target_ids: frozenset = frozenset()
    poison_ids: frozenset = frozenset()
    blur_variance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        self.target_ids = frozenset(int(i) for i in self.target_ids)
        self.poison_ids = frozenset(int(i) for i in self.poison_ids)
        if not self.amplify_ratio > 0:
            raise ConfigError("amplify ratio must be positive")
        if self.blur_variance < 0:
            raise ConfigError("blur variance must be non-negative")
        if self.target_ids & self.poison_ids:
            raise ConfigError("target and poison sample sets must be disjoint")
        if any(i < 0 for i in self.target_ids | self.poison_ids):
            raise ConfigError("sample ids must be non-negative")


@dataclass
class RecordedGradient:
    g_rec: np.ndarray | None = None
    seen: bool = False


def infer_labels(down: np.ndarray) -> np.ndarray:
    """Read labels off softmax cross-entropy gradients.

    The true class is the only entry with a negative gradient. Rows with zero
    or several negative entries get ``INFERENCE_FAILED``.
    """
    neg = np.asarray(down) < 0
    counts = neg.sum(axis=1)
    labels = np.argmax(neg, axis=1)
    return np.where(counts == 1, labels, INFERENCE_FAILED)


def substitute_gradient(down: np.ndarray, target_label: int,
                        rows=None) -> tuple[np.ndarray, int]:
    """Rewrite rows as if their label were ``target_label``.

    The softmax vector is rebuilt from the row itself (``S = g + onehot(y)``
    with ``y`` the inferred label). ``rows`` selects the rows to rewrite (all
    by default). Rows whose label cannot be inferred are left alone and
    counted; returns ``(new_matrix, skipped)``.
    """
    down = np.asarray(down, dtype=np.float64)
    if not 0 <= target_label < down.shape[1]:
        raise ConfigError(f"target label {target_label} out of range")
    out = down.copy()
    sel = np.arange(len(down)) if rows is None else np.asarray(rows, dtype=np.int64)
    if sel.size == 0:
        return out, 0
    inferred = infer_labels(down[sel])
    ok = inferred != INFERENCE_FAILED
    good = sel[ok]
    out[good, inferred[ok]] += 1.0
    out[good, target_label] -= 1.0
    return out, int((~ok).sum())


def gradient_replacement(down: np.ndarray, batch_indices, cfg: AttackConfig,
                         rec: RecordedGradient) -> tuple[np.ndarray, RecordedGradient, int]:
    """Record the target sample's gradient and paste ``gamma * g_rec`` onto poison rows.

    Rows are visited in batch order, so the last target row seen wins and a
    poison row before any recorded target keeps its gradient (counted as
    skipped). Returns ``(poisoned, rec, skipped)``; ``rec`` is updated in place.
    """
    down = np.asarray(down, dtype=np.float64)
    idx = np.asarray(batch_indices, dtype=np.int64)
    out = down.copy()
    skipped = 0
    targets = np.fromiter(cfg.target_ids, np.int64, len(cfg.target_ids))
    poisons = np.fromiter(cfg.poison_ids, np.int64, len(cfg.poison_ids))
    is_target = np.isin(idx, targets)
    is_poison = np.isin(idx, poisons)
    for i in np.flatnonzero(is_target | is_poison):
        if is_target[i]:
            rec.g_rec = down[i].copy()
            rec.seen = True
        if is_poison[i]:
            if rec.seen:
                out[i] = cfg.amplify_ratio * rec.g_rec
            else:
                skipped += 1
    return out, rec, skipped


def activation_blur(up: np.ndarray, batch_indices, cfg: AttackConfig,
                    round_index: int = 0) -> np.ndarray:
    """Replace poison rows by zero-mean Gaussian vectors with ``cfg.blur_variance``."""
    up = np.asarray(up, dtype=np.float64)
    idx = np.asarray(batch_indices, dtype=np.int64)
    poisons = np.fromiter(cfg.poison_ids, np.int64, len(cfg.poison_ids))
    rows = np.flatnonzero(np.isin(idx, poisons))
    if rows.size == 0:
        return up
    out = up.copy()
    std = np.sqrt(cfg.blur_variance)
    out[rows] = streams.per_row(cfg.seed, round_index, idx[rows], up.shape[1],
                                lambda rng, w: rng.normal(0.0, std, w))
    return out


# Interceptors -------------------------------------------------------------

class GradientReplacementAttack(Interceptor):
    site = Site.PASSIVE_APPLY
    name = "gradient_replacement"

    def __init__(self, cfg: AttackConfig):
        self.cfg = cfg
        self.party = cfg.malicious_party
        self.rec = RecordedGradient()
        self.skipped = 0

    def transform(self, message, ctx: RoundContext):
        out, self.rec, skipped = gradient_replacement(message, ctx.batch_indices, self.cfg, self.rec)
        self.skipped += skipped
        return out


class LabelSubstitutionAttack(Interceptor):
    """Substitute the poison rows' gradients with those of the target label."""

    site = Site.PASSIVE_APPLY
    name = "gradient_substitution"

    def __init__(self, cfg: AttackConfig):
        self.cfg = cfg
        self.party = cfg.malicious_party
        self.skipped = 0
        self._poisons = np.fromiter(cfg.poison_ids, np.int64, len(cfg.poison_ids))

    def transform(self, message, ctx: RoundContext):
        rows = np.flatnonzero(np.isin(ctx.batch_indices, self._poisons))
        out, skipped = substitute_gradient(message, self.cfg.target_label, rows)
        self.skipped += skipped
        return out


class ActivationBlur(Interceptor):
    site = Site.PASSIVE_UP
    name = "activation_blur"

    def __init__(self, cfg: AttackConfig):
        self.cfg = cfg
        self.party = cfg.malicious_party

    def transform(self, message, ctx: RoundContext):
        return activation_blur(message, ctx.batch_indices, self.cfg, ctx.round_index)


@dataclass
class LabelInferenceProbe(Interceptor):
    """Passive observer: logs the labels it can read off each received message."""

    party: int = 1
    site: Site = Site.PASSIVE_APPLY
    name: str = "label_inference_probe"
    ids: list = field(default_factory=list)
    inferred: list = field(default_factory=list)

    def transform(self, message, ctx: RoundContext):
        self.ids.append(ctx.batch_indices.copy())
        self.inferred.append(infer_labels(message))
        return message

    def results(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.ids:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return np.concatenate(self.ids), np.concatenate(self.inferred)
