"""Deterministic seed derivation.

Every stage draws its randomness from a generator seeded by a named
sub-seed of the single root seed, so stages can be rerun in isolation
and still reproduce the full-pipeline results bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root_seed: int, *names: str) -> int:
    """Derive a stable 63-bit sub-seed from a root seed and a name path.

    The same (root_seed, names) pair always maps to the same value,
    independent of platform and process.
    """
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode("utf-8"))
    for name in names:
        h.update(b"/")
        h.update(str(name).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def numpy_generator(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
