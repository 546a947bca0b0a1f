"""Seed splitting.

Every consumer of randomness derives its own stream from the global seed and
a stable name, so a stage re-run in isolation draws exactly what it drew
inside a full pipeline run::

    child = SeedSequence(entropy=global_seed, spawn_key=(crc32(name), *extra))

``extra`` carries integer coordinates such as an identity id, which keeps
per-identity streams independent of processing order.
"""

import zlib

import numpy as np


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def derive_seed(seed, name, *extra):
    return np.random.SeedSequence(
        entropy=int(seed), spawn_key=(stream_key(name),) + tuple(int(e) for e in extra)
    )


def derive_rng(seed, name, *extra):
    return np.random.default_rng(derive_seed(seed, name, *extra))


def derive_int(seed, name, *extra):
    """A 63-bit integer seed for components that take a plain integer."""
    return int(derive_seed(seed, name, *extra).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
