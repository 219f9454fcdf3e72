"""Deterministic randomness: one root seed, named counter-based substreams.

Every random draw in the library flows through `substream`, which keys a
Philox generator by (root seed, stream name, indices). Philox is
counter-based, so a stream's output depends only on its key, never on
how many draws other streams made. That property is what makes
mid-training resume bitwise equivalent to an uninterrupted run: there is
no mutable RNG state to snapshot, only (seed, step) coordinates.
"""

import numpy as np

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, state: int = FNV64_OFFSET) -> int:
    """64-bit FNV-1a over a byte string. Also used for parameter digests."""
    h = state
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


def stream_key(seed: int, name: str, *indices: int) -> int:
    """Collapse (seed, name, indices) into a single 64-bit Philox key."""
    h = fnv1a64(name.encode("utf-8"))
    for idx in indices:
        h = fnv1a64(int(idx).to_bytes(8, "little", signed=False), state=h)
    return (h ^ (seed & _MASK64)) & _MASK64


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Fresh generator for one named substream of the root seed."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name, *indices)))
