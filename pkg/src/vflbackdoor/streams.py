"""Seeded random streams.

Each consumer (initialisation, shuffling, attack, defense, data) gets its own
child of the run seed, so toggling a defense never perturbs initialisation.
Per-row draws are keyed by ``(stream seed, round, sample id)``; a row's random
vector therefore does not depend on its position inside the batch.
"""
from __future__ import annotations

import numpy as np

STREAMS = ("data", "init", "shuffle", "attack", "defense")


def stream_seeds(seed: int) -> dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: int(c.generate_state(1, np.uint64)[0] >> np.uint64(1))
            for name, c in zip(STREAMS, children)}


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seeds(seed)[name])


def per_row(seed: int, round_index: int, sample_ids, width: int, draw) -> np.ndarray:
    """Stack ``draw(rng, width)`` for each sample id.

    Each row uses a Philox stream with key ``(seed, round)`` and the sample id in
    the counter, so rows are independent and reproducible in any order.
    """
    out = np.empty((len(sample_ids), width))
    bits = np.random.Philox(key=[seed % 2**64, round_index % 2**64])
    state = bits.state
    rng = np.random.Generator(bits)
    for r, sid in enumerate(sample_ids):
        state["state"]["counter"] = np.array([0, 0, 0, int(sid)], dtype=np.uint64)
        state["buffer_pos"] = 4  # discard buffered output from the previous row
        state["has_uint32"] = 0
        bits.state = state
        out[r] = draw(rng, width)
    return out
