"""Labelled sub-seed derivation so each random component is reproducible alone."""

import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> np.random.SeedSequence:
    key = "/".join(str(x) for x in labels).encode()
    digest = hashlib.sha256(key).digest()
    words = [int.from_bytes(digest[k:k + 4], "little") for k in range(0, 16, 4)]
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words])


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for domain ``labels`` (e.g. ``"augment", epoch, u``) of run ``seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))
