"""Named random streams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np

INIT = "init"
SHUFFLE = "shuffle"


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream `name` of run `seed`.

    Each stream is keyed by the crc32 of its name, so adding a stream never
    changes the draws of an existing one.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))
