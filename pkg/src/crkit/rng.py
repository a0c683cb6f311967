"""Seeded, counter-based random streams.

Every stream is a Philox-4x64 generator (numpy's ``Philox`` bit generator)
whose 128-bit key is the BLAKE2b digest of ``(seed, stream name)`` and whose
counter starts at ``offset``. The same ``RngState`` therefore yields the same
numbers on every run and platform, and named streams never perturb each other.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
import hashlib

import numpy as np

ALGORITHM = "philox4x64-blake2b-key"


@dataclass(frozen=True)
class RngState:
    seed: int
    stream: str = "gumbel"
    offset: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def substream(self, name: str) -> "RngState":
        return replace(self, stream=name, offset=0)

    def _key(self) -> int:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.seed.to_bytes(8, "little"))
        h.update(self.stream.encode("utf-8"))
        return int.from_bytes(h.digest(), "little")

    def bit_generator(self) -> np.random.Philox:
        bg = np.random.Philox(key=self._key())
        if self.offset:
            bg.advance(self.offset)
        return bg


def raw_uint64(rng: RngState, count: int) -> np.ndarray:
    return rng.bit_generator().random_raw(count).astype(np.uint64)


def uniform_open(rng: RngState, shape) -> np.ndarray:
    """Float64 uniforms strictly inside (0, 1), one raw draw per value."""
    count = int(np.prod(shape))
    bits = raw_uint64(rng, count) >> np.uint64(11)
    u = (bits.astype(np.float64) + 0.5) * 2.0**-53
    return u.reshape(shape)


def uniform(rng: RngState, shape, low: float = -1.0, high: float = 1.0) -> np.ndarray:
    return low + (high - low) * uniform_open(rng, shape)


def gumbel_noise(rng: RngState, shape) -> np.ndarray:
    """Standard Gumbel samples ``-log(-log(u))``."""
    return -np.log(-np.log(uniform_open(rng, shape)))


def generator(rng: RngState) -> np.random.Generator:
    """A numpy Generator over the stream, for integer/choice draws in fixtures."""
    return np.random.Generator(rng.bit_generator())
