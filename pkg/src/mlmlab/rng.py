"""Counter-keyed random streams.

Every source of randomness in a run is a pure function of (seed, tag,
counters): epoch shuffles, masking, dropout, per-anchor contrastive sampling,
and probes each get an independent stream.  Nothing draws from a shared
stateful generator, so resuming at step t reproduces the exact randomness of
an uninterrupted run from nothing but the seed and the step counter.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "AnchorStreams"]


def _digest(seed, tag, counters):
    payload = repr((int(seed), str(tag), tuple(int(c) for c in counters)))
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=16).digest()


def stream(seed, tag, *counters):
    """Generator determined entirely by (seed, tag, counters)."""
    return np.random.default_rng(int.from_bytes(_digest(seed, tag, counters), "little"))


class AnchorStreams:
    """Factory of per-anchor generators for contrastive sampling.

    Keying each anchor by (step, row, position) makes the drawn samples
    independent of anchor iteration order, so sequential and parallel anchor
    evaluation, and the taco/concentrated variants over the same anchor set,
    all see identical draws.
    """

    def __init__(self, seed, step):
        self.seed = int(seed)
        self.step = int(step)

    def anchor(self, row, position):
        return stream(self.seed, "tc-anchor", self.step, row, position)
