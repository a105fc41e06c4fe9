"""Deterministic sub-seed derivation.

Every run is driven by a single integer seed. Independent random streams
(parameter init, epoch shuffling, dataset splits, grid trials, ...) get
their own seeds derived from that root seed plus a role label, so adding
or reordering consumers never perturbs the others.
"""

from __future__ import annotations

import hashlib

__all__ = ["derive_seed"]


def derive_seed(seed: int, role: str) -> int:
    """Hash (seed, role) into a 63-bit sub-seed.

    The rule is `sha256(f"{seed}:{role}")` truncated to 8 bytes with the
    sign bit cleared; it is stable across platforms and Python versions.
    """
    digest = hashlib.sha256(f"{int(seed)}:{role}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF
