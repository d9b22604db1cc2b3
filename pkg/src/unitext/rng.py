"""Named random sub-streams derived from one global seed.

Every consumer asks for ``stream(seed, purpose, ...)`` so draws do not depend
on the order in which utterances, epochs or workers are visited.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *parts))
