"""Seeded, counter-based random streams.

Every random draw in the package comes from :func:`stream`. A stream is a
``numpy.random.Generator`` over the Philox counter-based bit generator whose
key is derived from the run seed and a tuple of stream names::

    key = SeedSequence(entropy=seed, spawn_key=(crc32(name_1), crc32(name_2), ...))

Streams with different name paths are statistically independent, and adding a
new named stream never shifts the draws of an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np

MAX_SEED = 2**64 - 1


def check_seed(seed: object) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be in [0, 2**64 - 1], got {seed}")
    return seed


def stream_key(*names: str) -> tuple[int, ...]:
    return tuple(zlib.crc32(name.encode("utf-8")) for name in names)


def stream(seed: int, *names: str) -> np.random.Generator:
    """Return the generator for the stream ``names`` under ``seed``."""
    seq = np.random.SeedSequence(entropy=check_seed(seed), spawn_key=stream_key(*names))
    return np.random.Generator(np.random.Philox(seq))
