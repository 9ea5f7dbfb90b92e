"""Labeled random substreams derived from one 64-bit experiment seed."""

import hashlib

import numpy as np

MAX_SEED = 2**64 - 1


def _label_words(label):
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def substream(seed, *labels):
    """Return a Generator for ``labels`` under ``seed``.

    The same (seed, labels) pair always yields the same stream, and streams
    for different labels are statistically independent.
    """
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"seed must fit in 64 bits, got {seed}")
    entropy = [int(seed) & 0xFFFFFFFF, int(seed) >> 32]
    for label in labels:
        entropy.extend(_label_words(str(label)))
    return np.random.default_rng(np.random.SeedSequence(entropy))
