"""Deterministic seed derivation.

Every source of randomness in a run is seeded from the run's global seed
plus a path of context labels (task, round, client, purpose). Seeds are
derived by hashing, so any client/round can be reconstructed in isolation
and execution order never matters.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(*parts: object) -> int:
    """Hash a context path into a stable 63-bit seed."""
    key = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def torch_generator(*parts: object) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen


def numpy_generator(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
