"""Named sub-seed derivation so each component draws from its own stream."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *names: object) -> int:
    key = ":".join([str(int(root))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def generator(root: int, *names: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
