"""Seed derivation.

One global seed fans out to per-module / per-step seeds through a
splitmix64 mix, so adding a consumer never shifts unrelated randomness.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def derive_seed(base: int, *parts) -> int:
    """Derive a child seed from a base seed and a path of str/int parts."""
    x = base & MASK64
    for part in parts:
        if isinstance(part, str):
            for ch in part.encode("utf-8"):
                x = splitmix64(x ^ ch)
        else:
            x = splitmix64(x ^ (int(part) & MASK64))
    return x
