"""Stable 64-bit hashing for fingerprints and per-item seed derivation.

Python's builtin ``hash`` is salted per process, so everything that must be
reproducible across runs (checkpoint integrity, per-image RNG streams, stage
fingerprints) goes through FNV-1a instead.
"""

from __future__ import annotations

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, state: int = _FNV_OFFSET) -> int:
    """FNV-1a over ``data``, optionally continuing from a previous state."""
    h = state
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


class Fnv1a:
    """Incremental FNV-1a, for hashing large payloads chunk by chunk."""

    def __init__(self) -> None:
        self.state = _FNV_OFFSET

    def update(self, data: bytes) -> "Fnv1a":
        self.state = fnv1a64(data, self.state)
        return self

    def digest(self) -> int:
        return self.state


def derive_seed(*parts: int) -> int:
    """Fold integer parts into one 64-bit seed, stable across runs."""
    h = _FNV_OFFSET
    for part in parts:
        h = fnv1a64(int(part).to_bytes(8, "little", signed=False), h)
    return h


def content_hash64(*chunks: bytes) -> int:
    """Fast stable 64-bit digest for large payloads (dataset fingerprints).

    blake2b keeps multi-megabyte image arrays out of the byte-at-a-time
    FNV loop; FNV-1a stays reserved for the checkpoint container format.
    """
    import hashlib

    h = hashlib.blake2b(digest_size=8)
    for chunk in chunks:
        h.update(chunk)
    return int.from_bytes(h.digest(), "little")
