"""Deterministic fan-out of a master seed into named sub-streams.

A sub-seed is ``SeedSequence([master, crc32(name), *extra])``, so each named
stream (``"partition"``, ``"noise"``, ``"init"``, ...) is unaffected by how many
draws any other stream makes.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def sub_seed(master: int, name: str, *extra: int) -> int:
    """Return a 63-bit integer seed for stream ``name`` (plus optional indices)."""
    ss = np.random.SeedSequence([int(master), _name_key(name), *(int(e) for e in extra)])
    hi, lo = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) & ((1 << 63) - 1)


def sub_rng(master: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(sub_seed(master, name, *extra))


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
