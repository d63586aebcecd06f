"""Seeded random streams.

Streams are numpy ``Generator`` objects over the PCG64 bit generator
(128-bit LCG, multiplier 0x2360ED051FC65DA44385DF649FCCF645, output XSL-RR),
seeded through ``SeedSequence(seed)``. Both the bit generator and the
``SeedSequence`` hashing are specified independent of platform, so a seed
reproduces the same draws everywhere for a given numpy major version.

Sub-seeds are derived with :func:`derive_seed`: BLAKE2b (8-byte digest) of the
UTF-8 string ``"<seed>/<key1>/<key2>..."``, read little-endian as a uint64.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


class SeededStream:
    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None, dtype=np.float64):
        return self.gen.standard_normal(size, dtype=dtype)

    def integers(self, low, high, size=None):
        """Uniform integers in ``[low, high]`` inclusive."""
        return self.gen.integers(low, high, size=size, endpoint=True)

    def spawn(self, *keys) -> "SeededStream":
        return SeededStream(derive_seed(self.seed, *keys))


def seeded_stream(seed: int) -> SeededStream:
    return SeededStream(seed)


def derive_seed(seed: int, *keys) -> int:
    text = "/".join([str(int(seed) & MASK64)] + [str(k) for k in keys])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")
