"""Deterministic seed derivation for independent random streams.

Every stochastic stage derives its generator seed from a master seed
plus a stage label, so streams stay decoupled (adding draws to one
stage never shifts another) and runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from the given parts (strings, ints, ...)."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")
