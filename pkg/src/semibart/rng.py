"""Reproducible, splittable random-number streams."""

from __future__ import annotations

import numpy as np


class RngStream:
    """A keyed stream of random numbers.

    Identical ``(seed, stream_id)`` pairs always produce the same draw
    sequence; distinct stream ids give statistically independent streams,
    so parallel chains and simulation replicates can share one seed
    without sharing randomness. ``stream_id`` may be an int or a tuple of
    ints (nested substreams).
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        self.seed = int(seed)
        self.stream_id = stream_id
        key = (stream_id,) if isinstance(stream_id, int) else tuple(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def substream(self, k: int) -> "RngStream":
        """A fresh independent stream derived from this one's identity."""
        base = (self.stream_id,) if isinstance(self.stream_id, int) else tuple(self.stream_id)
        return RngStream(self.seed, base + (int(k),))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r})"
