"""Named random sub-streams derived from one user seed."""

import zlib

import numpy as np


def substream(seed, name):
    """Independent generator for ``name`` (e.g. ``init``, ``sampler``, ``augment``)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def substream_seed(seed, name):
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])
