"""
Named random streams.

Every random draw in the toolkit comes from `stream(seed, name)`. The stream for
a given name depends only on the root seed and that name, so adding, removing
or reordering other consumers never shifts the numbers a module sees.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Returns an independent generator for `name` derived from the root `seed`."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))
