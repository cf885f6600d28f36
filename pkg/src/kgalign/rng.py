"""Seeded random streams: Philox-4x64 counters with Box-Muller normals.

Streams are keyed by a hash of their name parts, so the same
``(seed, "purpose", ...)`` tuple gives the same numbers on any platform and
independent of the order in which other streams were drawn.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(*parts) -> int:
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


def generator(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(*parts)))


def normal(gen: np.random.Generator, shape, std: float = 1.0) -> np.ndarray:
    """Box-Muller transform over the generator's uniform doubles."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    n = int(np.prod(shape, dtype=np.int64))
    half = (n + 1) // 2
    u1 = 1.0 - gen.random(half)  # (0, 1]
    u2 = gen.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
    return (std * z).reshape(shape)


def permutation(gen: np.random.Generator, n: int) -> np.ndarray:
    return gen.permutation(n)
