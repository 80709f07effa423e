"""Seed derivation.

All randomness comes from numpy's PCG64 bit generator. Child seeds are
derived from a parent seed and a text label with BLAKE2b, so adding a new
consumer of randomness never shifts the streams of existing ones::

    derive_seed(master, "split") == int.from_bytes(
        blake2b(f"{master}:split".encode(), digest_size=8).digest(), "little")
"""
from hashlib import blake2b

import numpy as np

U64_MASK = (1 << 64) - 1


def derive_seed(seed, *labels) -> int:
    s = int(seed) & U64_MASK
    for label in labels:
        h = blake2b(f"{s}:{label}".encode(), digest_size=8)
        s = int.from_bytes(h.digest(), "little")
    return s


def make_rng(seed, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))
