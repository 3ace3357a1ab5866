"""Seed derivation: every generator comes from (base_seed, purpose, index).

Components never share generator state, so results do not depend on the
order in which episodes are processed.
"""

import zlib

import numpy as np


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_rng(base_seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    if base_seed < 0 or index < 0:
        raise ValueError("seeds and indices must be nonnegative")
    return np.random.default_rng([int(base_seed), purpose_code(purpose), int(index)])
