"""Deterministic seed derivation.

Every random stream in the project is seeded by ``split_seed(master, name)``
with a stable component name (e.g. ``"dataset"``, ``"init.theta"``,
``"client.3.round.17"``). The split is the first 8 bytes, little-endian,
of SHA-256 over ``"{master}:{name}"``, masked to 63 bits so it is a valid
seed everywhere. Adding a new component therefore never perturbs the
streams of existing ones.
"""

from __future__ import annotations

import hashlib


def split_seed(master_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def fnv1a64(data: bytes) -> int:
    """Small stable string hash (FNV-1a), used for vocabulary binning."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFF_FFFF_FFFF_FFFF
    return h
