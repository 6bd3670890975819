"""Round-by-round message exchange between feature parties and the label party.

One call to :func:`run_round` is one iteration of the training loop:

1. every passive party computes its representation ``H^k`` for the batch;
2. ``PASSIVE_UP`` interceptors rewrite what party ``k`` sends;
3. the active party merges the representations, computes the loss and the
   per-party intermediate gradients ``dl/dH^k`` and updates its head;
4. ``ACTIVE_DOWN`` interceptors (the active party's defenses) rewrite each
   down message;
5. ``PASSIVE_APPLY`` interceptors rewrite the copy party ``k`` trains on;
6. each passive party back-propagates its message into its own layers.

Down messages are per-sample gradients (row ``i`` is the gradient of sample
``i``'s loss); parties divide by the batch size when updating, so the protocol
performs SGD on the batch-mean loss.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, ProtocolError

SUM_HEAD = "sum"
TRAINABLE_HEAD = "trainable"


class Site(enum.Enum):
    PASSIVE_UP = "passive_up"
    ACTIVE_DOWN = "active_down"
    PASSIVE_APPLY = "passive_apply"


@dataclass
class RoundContext:
    batch_indices: np.ndarray  # sample ids of the batch rows
    party: int
    round_index: int = 0
    epoch: int = 0


class Interceptor:
    """A message transform attached to one protocol site.

    ``party=None`` attaches to every party at that site. Subclasses override
    :meth:`transform`; the returned matrix must keep the input's shape.
    """

    site: Site = Site.ACTIVE_DOWN
    party: int | None = None
    name: str = "interceptor"

    def transform(self, message: np.ndarray, ctx: RoundContext) -> np.ndarray:
        return message

    def applies_to(self, site: Site, party: int) -> bool:
        return self.site is site and (self.party is None or self.party == party)

    def __repr__(self):
        where = "*" if self.party is None else self.party
        return f"{type(self).__name__}({self.site.value}[{where}])"


class FunctionInterceptor(Interceptor):
    """Wrap a plain ``f(message, ctx) -> message`` callable."""

    def __init__(self, site: Site, fn: Callable[[np.ndarray, RoundContext], np.ndarray],
                 party: int | None = None, name: str | None = None):
        self.site = site
        self.party = party
        self.fn = fn
        self.name = name or getattr(fn, "__name__", "fn")

    def transform(self, message, ctx):
        return self.fn(message, ctx)


@dataclass
class PassiveParty:
    id: int
    layers: list[nn.DenseLayer]
    features: np.ndarray  # this party's training block, (N, d_k)
    optimizer: nn.SgdState = field(default_factory=nn.SgdState)

    @property
    def width(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        return nn.stack_forward(self.layers, x)

    def apply_gradient(self, acts: Sequence[np.ndarray], grad_h: np.ndarray) -> None:
        grads, _ = nn.stack_backward(self.layers, acts, grad_h)
        scale = 1.0 / grad_h.shape[0]
        self.layers = nn.stack_step(self.layers, [g.scaled(scale) for g in grads], self.optimizer)


@dataclass
class ActiveParty:
    labels: np.ndarray  # training labels, indexed by sample id
    num_classes: int
    head: str = SUM_HEAD
    head_layers: list[nn.DenseLayer] = field(default_factory=list)
    optimizer: nn.SgdState = field(default_factory=nn.SgdState)

    def __post_init__(self):
        if self.head not in (SUM_HEAD, TRAINABLE_HEAD):
            raise ConfigError(f"unknown head kind {self.head!r}")
        if self.head == TRAINABLE_HEAD and not self.head_layers:
            raise ConfigError("a trainable head needs layers")
        if self.head == SUM_HEAD and self.head_layers:
            raise ConfigError("the sum head has no parameters")

    @property
    def trainable(self) -> bool:
        return self.head == TRAINABLE_HEAD

    def logits(self, reps: Sequence[np.ndarray]) -> np.ndarray:
        if self.trainable:
            return nn.stack_forward(self.head_layers, np.concatenate(reps, axis=1))[0]
        return _sum_reps(reps)


@dataclass
class RoundMessages:
    batch_indices: np.ndarray
    up: dict[int, np.ndarray]  # what each party sent (after PASSIVE_UP)
    down: dict[int, np.ndarray]  # what the active party sent (after ACTIVE_DOWN)
    applied: dict[int, np.ndarray]  # what each party trained on (after PASSIVE_APPLY)


@dataclass
class RoundResult:
    loss: float
    messages: RoundMessages


def _sum_reps(reps: Sequence[np.ndarray]) -> np.ndarray:
    widths = {r.shape[1] for r in reps}
    if len(widths) != 1:
        raise ConfigError(f"the sum head needs equal representation widths, got {sorted(widths)}")
    total = reps[0].copy()
    for r in reps[1:]:
        total += r
    return total


def merge_untrainable(reps: Sequence[np.ndarray], labels) -> tuple[float, list[np.ndarray]]:
    """Softmax over the summed representations; every party gets the same gradient."""
    loss, grad = nn.softmax_ce_grad(_sum_reps(reps), labels)
    return loss, [grad.copy() for _ in reps]


def merge_trainable(reps: Sequence[np.ndarray], labels, head: Sequence[nn.DenseLayer]
                    ) -> tuple[float, list[np.ndarray], list[nn.LayerGrads]]:
    """Concatenate, run the head, and split the input gradient back per party.

    Head gradients are those of the batch-mean loss; the per-party messages
    are per-sample gradients.
    """
    widths = [r.shape[1] for r in reps]
    if sum(widths) != head[0].in_dim:
        raise ConfigError(f"head expects {head[0].in_dim} inputs, parties provide {sum(widths)}")
    logits, acts = nn.stack_forward(head, np.concatenate(reps, axis=1))
    loss, grad = nn.softmax_ce_grad(logits, labels)
    head_grads, grad_in = nn.stack_backward(head, acts, grad)
    scale = 1.0 / grad.shape[0]
    head_grads = [g.scaled(scale) for g in head_grads]
    bounds = np.cumsum([0] + widths)
    parts = [grad_in[:, lo:hi].copy() for lo, hi in zip(bounds[:-1], bounds[1:])]
    return loss, parts, head_grads


def _apply_site(interceptors: Sequence[Interceptor], site: Site, party: int,
                message: np.ndarray, ctx: RoundContext) -> np.ndarray:
    for icp in interceptors:
        if not icp.applies_to(site, party):
            continue
        out = np.asarray(icp.transform(message, ctx), dtype=np.float64)
        if out.shape != message.shape:
            raise ProtocolError(
                f"{site.value}[{party}]",
                f"interceptor {icp.name!r} changed message shape {message.shape} -> {out.shape}",
            )
        message = out
    return message


def run_round(parties: Sequence[PassiveParty], active: ActiveParty, batch_indices,
              interceptors: Sequence[Interceptor] = (), round_index: int = 0,
              epoch: int = 0) -> RoundResult:
    """Execute one training round in place; see the module docstring for the order."""
    idx = np.asarray(batch_indices, dtype=np.int64)
    ctxs = {p.id: RoundContext(idx, p.id, round_index, epoch) for p in parties}

    up, acts = {}, {}
    for p in parties:
        h, acts[p.id] = p.forward(p.features[idx])
        up[p.id] = _apply_site(interceptors, Site.PASSIVE_UP, p.id, h, ctxs[p.id])

    reps = [up[p.id] for p in parties]
    labels = active.labels[idx]
    if active.trainable:
        loss, grads, head_grads = merge_trainable(reps, labels, active.head_layers)
        active.head_layers = nn.stack_step(active.head_layers, head_grads, active.optimizer)
    else:
        loss, grads = merge_untrainable(reps, labels)

    down, applied = {}, {}
    for p, g in zip(parties, grads):
        down[p.id] = _apply_site(interceptors, Site.ACTIVE_DOWN, p.id, g, ctxs[p.id])
        if down[p.id].shape != up[p.id].shape:
            raise ProtocolError(Site.ACTIVE_DOWN.value, "down message shape differs from up message")
        applied[p.id] = _apply_site(interceptors, Site.PASSIVE_APPLY, p.id, down[p.id], ctxs[p.id])

    for p in parties:
        p.apply_gradient(acts[p.id], applied[p.id])

    return RoundResult(loss, RoundMessages(idx, up, down, applied))


def forward_logits(parties: Sequence[PassiveParty], active: ActiveParty,
                   blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Inference-time forward pass. No interceptors are involved."""
    if len(blocks) != len(parties):
        raise ConfigError(f"expected {len(parties)} feature blocks, got {len(blocks)}")
    reps = [p.forward(b)[0] for p, b in zip(parties, blocks)]
    return active.logits(reps)


def predict(parties: Sequence[PassiveParty], active: ActiveParty,
            blocks: Sequence[np.ndarray]) -> np.ndarray:
    """Arg-max class per sample; ties go to the lowest class index."""
    return np.argmax(forward_logits(parties, active, blocks), axis=1)


def build_parties(blocks: Sequence[np.ndarray], labels: np.ndarray, num_classes: int,
                  head: str, rng: np.random.Generator, hidden: int = 32,
                  optimizer: nn.SgdState | None = None
                  ) -> tuple[list[PassiveParty], ActiveParty]:
    """Standard topology.

    With the sum head each party is ``d_k -> hidden (ReLU) -> num_classes`` so the
    summed outputs are logits. With the trainable head each party is
    ``d_k -> hidden (ReLU)`` and the active party runs
    ``concat -> hidden (ReLU) -> num_classes``.
    """
    optimizer = optimizer or nn.SgdState()
    parties = []
    for k, block in enumerate(blocks):
        layers = [nn.init_dense(block.shape[1], hidden, rng, nn.RELU)]
        if head == SUM_HEAD:
            layers.append(nn.init_dense(hidden, num_classes, rng, nn.IDENTITY))
        parties.append(PassiveParty(k, layers, np.asarray(block, dtype=np.float64), optimizer))
    head_layers = []
    if head == TRAINABLE_HEAD:
        width = sum(p.width for p in parties)
        head_layers = [nn.init_dense(width, hidden, rng, nn.RELU),
                       nn.init_dense(hidden, num_classes, rng, nn.IDENTITY)]
    active = ActiveParty(np.asarray(labels), num_classes, head, head_layers, optimizer)
    return parties, active
