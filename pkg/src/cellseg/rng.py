"""Seeded, purpose-split random streams.

Every source of randomness in the engine (weight init, Bernoulli update
masks, reset noise, pool resampling, data generation) draws from its own
counter-based Philox stream keyed by ``(seed, stream_id)``.  Distinct keys
give statistically independent streams, and a given (seed, stream, draw
sequence) reproduces bit-identically across runs and platforms.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor

# stream ids, one per purpose
STREAM_INIT = 1      # weight + state initialisation
STREAM_MASK = 2      # per-cell Bernoulli update masks
STREAM_NOISE = 3     # reset-gate noise z
STREAM_POOL = 4      # pool resampling decisions
STREAM_DATA = 5      # dataset generation / sample draws

_SUBSTREAM_SHIFT = 8  # purpose ids stay below 2**8


class RngStream:
    """One independent random stream, identified by (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: int):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if not 0 <= stream_id < 2**64:
            raise ValueError("stream_id must fit in 64 bits")
        self.seed = seed
        self.stream_id = stream_id
        key = (seed << 64) | stream_id
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, index: int) -> "RngStream":
        """Derived independent stream; (purpose, index) pairs never collide."""
        return RngStream(self.seed, ((index + 1) << _SUBSTREAM_SHIFT) | self.stream_id)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype)

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.random(shape).astype(dtype)

    def bernoulli(self, p: float, shape, dtype=np.float32) -> np.ndarray:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"bernoulli p must be in [0,1], got {p}")
        return (self._gen.random(shape) < p).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)


def sample(kind: str, shape, param, rng: RngStream, dtype=np.float32) -> Tensor:
    """Draw an i.i.d. tensor; samples are constants (no gradient flows back)."""
    if kind == "gaussian":
        data = rng.normal(shape, dtype=dtype) * param if param != 1.0 else rng.normal(shape, dtype=dtype)
    elif kind == "bernoulli":
        data = rng.bernoulli(param, shape, dtype=dtype)
    else:
        raise ValueError(f"unknown sample kind {kind!r}")
    return Tensor(data)


class StreamSet:
    """The five per-purpose streams for one run seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self.init = RngStream(seed, STREAM_INIT)
        self.mask = RngStream(seed, STREAM_MASK)
        self.noise = RngStream(seed, STREAM_NOISE)
        self.pool = RngStream(seed, STREAM_POOL)
        self.data = RngStream(seed, STREAM_DATA)
