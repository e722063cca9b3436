"""Per-module random streams derived from one global seed.

Each consumer asks for a stream by tag; the tag is hashed with SHA-256 so the
derivation is stable across Python processes and platforms (unlike ``hash``).
"""

import hashlib

import numpy as np


def tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


def derive_seed(seed: int, tag: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag_hash(tag)])


def rng_for(seed: int, tag: str) -> np.random.Generator:
    """Independent generator for ``tag`` under the global ``seed``."""
    return np.random.default_rng(derive_seed(seed, tag))
