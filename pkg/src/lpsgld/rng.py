"""Seeded random streams.

Every stochastic component draws from a :class:`RngStream`, identified by a
64-bit seed and a 64-bit stream id plus an optional path of child keys. The
underlying bit generator is PCG64 seeded through ``numpy.random.SeedSequence``
with the stream id (and path) as spawn key, so distinct ids give independent
sequences and identical ids reproduce the same draws.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1


def stable_hash(*parts: object) -> int:
    """Process-independent 64-bit hash of ``parts`` (unlike builtin ``hash``)."""
    text = "\x1f".join(repr(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self):
        for value in (self.seed, self.stream_id, *self.path):
            if not 0 <= int(value) <= _U64:
                raise ValueError(f"stream key {value!r} is not an unsigned 64-bit integer")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.path))
        return np.random.Generator(np.random.PCG64(seq))

    def child(self, key: int | str) -> RngStream:
        if isinstance(key, str):
            key = stable_hash(key)
        return RngStream(self.seed, self.stream_id, self.path + (int(key),))
