"""Deterministic child-seed derivation.

Child streams are keyed by name so adding a task never perturbs the
randomness of existing ones.
"""

import hashlib


def derive_seed(master: int, key: str) -> int:
    """Stable 63-bit child seed for (master, key)."""
    digest = hashlib.sha256(f"{master}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF
