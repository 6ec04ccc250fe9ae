"""Stable seed derivation (independent of PYTHONHASHSEED)."""

import hashlib


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
