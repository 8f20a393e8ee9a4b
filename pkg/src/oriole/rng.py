"""Named, counter-based random streams.

Every stream is a Philox generator keyed by a hash of the run seed and a
tuple of names, so adding a new consumer never shifts the draws of an
existing one.
"""

import hashlib

import numpy as np


def stream_key(seed, *names):
    h = hashlib.sha256(str(int(seed)).encode())
    for name in names:
        h.update(b"\x00")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:16], "little")


def stream(seed, *names):
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))


def derive_seed(seed, *names):
    """A 63-bit integer seed derived from (seed, names)."""
    return stream_key(seed, *names) & ((1 << 63) - 1)
