import zlib

import numpy as np


def substream(seed, name):
    """Independent generator for the named component under a root seed.

    The same ``(seed, name)`` always yields the same stream, and streams with
    different names do not overlap.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
