"""Derive independent child seeds from one master seed.

``child_seed(master, label, index)`` is the first 8 bytes (little endian) of
``blake2b(f"{master}:{label}:{index}", digest_size=8)``.  The hash is part of
the reproducibility contract: changing it changes every result row.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(master: int, label: str, index: int = 0) -> int:
    digest = hashlib.blake2b(f"{int(master)}:{label}:{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def child_rng(master: int, label: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(child_seed(master, label, index))
