"""Counter-based, splittable random streams.

Every stream is a Philox generator keyed by ``(seed, stream_id)``, where the
id is a tuple of integers (string labels are hashed).  Two streams with
different ids are independent, and the same key always replays the same
draws, so replicates can run in any order or process.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


def _encode(label):
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("stream ids must be non-negative")
        return int(label)
    if isinstance(label, str):
        # offset keeps string labels disjoint from small integer ids
        return (1 << 32) + zlib.crc32(label.encode("utf-8"))
    raise TypeError(f"unsupported stream id component: {label!r}")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by a seed and a path of ids."""

    seed: int
    stream_id: tuple = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        key = tuple(_encode(c) for c in self.stream_id)
        ss = np.random.SeedSequence(int(self.seed), spawn_key=key)
        object.__setattr__(self, "_gen", np.random.Generator(np.random.Philox(ss)))

    def child(self, *ids) -> "RngStream":
        """Return the independent sub-stream ``stream_id + ids``."""
        return RngStream(self.seed, self.stream_id + tuple(ids))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    # thin pass-throughs for the draws used across the package
    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, high, size=None):
        return self._gen.integers(0, high, size=size)


def as_stream(rng) -> RngStream:
    """Coerce an int seed or an existing stream into an :class:`RngStream`."""
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError(f"expected RngStream or int seed, got {type(rng).__name__}")
