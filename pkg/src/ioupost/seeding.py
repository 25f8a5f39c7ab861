"""Deterministic seed derivation: one master seed per run, split by counters."""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _as_int(key: Key) -> int:
    if isinstance(key, int):
        return key
    return zlib.crc32(key.encode("utf-8"))


def child_rng(master_seed: int, *keys: Key) -> np.random.Generator:
    """Generator for a labeled child stream of the master seed."""
    seq = np.random.SeedSequence(master_seed, spawn_key=tuple(_as_int(k) for k in keys))
    return np.random.default_rng(seq)


def child_seed(master_seed: int, *keys: Key) -> int:
    """Stable integer seed for components that take a plain seed."""
    seq = np.random.SeedSequence(master_seed, spawn_key=tuple(_as_int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0] % (2**63))
