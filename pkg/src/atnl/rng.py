"""Seeded, splittable random streams.

Every consumer of randomness (initialisation, dropout, data shuffling, ...)
draws from its own named Philox stream derived from a single integer seed,
so adding draws in one place never perturbs another.
"""

import zlib

import numpy as np


def stream(seed: int, name: str = "", *extra: int) -> np.random.Generator:
    """Return an independent counter-based generator for ``(seed, name, *extra)``."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8")), *(int(e) for e in extra)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
