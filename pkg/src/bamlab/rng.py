"""Named random sub-streams derived from a single run seed."""

import zlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, name, ...)``; names may be str or int."""
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(name.encode()) if isinstance(name, str) else int(name))
    return np.random.default_rng(key)
