"""Named, counter-based random streams.

Every random draw in the package goes through :func:`stream`, which keys a
Philox generator on ``(seed, name)``. Two streams with different names never
share state, so partial reruns (one clip, one model) reproduce exactly.
"""

import hashlib

import numpy as np


def derive_seed(seed, name):
    """Mix a user seed and a stream name into a 128-bit Philox key."""
    digest = hashlib.blake2b(
        f"{int(seed)}:{name}".encode("utf-8"), digest_size=16
    ).digest()
    return int.from_bytes(digest, "little")


def stream(seed, name):
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, name)))
