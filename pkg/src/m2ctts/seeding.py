"""Deterministic seed derivation shared across the package."""

import hashlib

_MASK63 = (1 << 63) - 1


def stable_seed(*parts) -> int:
    """Derive a 63-bit integer seed from the given parts.

    Unlike the builtin ``hash()``, the result is stable across processes
    and platforms, which keeps stub features, parameter init, and data
    order reproducible. Parts are length-prefixed before hashing so that
    ("ab", "c") and ("a", "bc") never collide.
    """
    digest = hashlib.sha256()
    for part in parts:
        data = str(part).encode("utf-8")
        digest.update(len(data).to_bytes(4, "little"))
        digest.update(data)
    return int.from_bytes(digest.digest()[:8], "little") & _MASK63
