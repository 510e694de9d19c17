"""Labelled, seed-derived random streams.

Every random draw in the package goes through an :class:`RngStream`. A stream
is fully determined by ``(seed, label)``, so results never depend on the
order in which clients or threads happen to run.
"""
from __future__ import annotations

import hashlib

import numpy as np

SERVER_ID = -1

_MASK64 = (1 << 64) - 1


def _label_word(part) -> int:
    digest = hashlib.sha256(repr(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStream:
    """A single-consumer random stream keyed by a seed and a purpose label."""

    def __init__(self, seed: int, label: tuple = ()):
        self.seed = int(seed) & _MASK64
        self.label = tuple(label)
        entropy = [self.seed] + [_label_word(p) for p in self.label]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r})"

    def child(self, *parts) -> "RngStream":
        return RngStream(self.seed, self.label + parts)

    def normal(self, size, scale=1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(size) * scale).astype(dtype)

    def uniform(self, size, dtype=np.float32) -> np.ndarray:
        return self._gen.random(size).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def raw(self, n: int) -> np.ndarray:
        """First ``n`` raw 64-bit outputs; used for collision checks."""
        return self._gen.integers(0, _MASK64, size=n, dtype=np.uint64, endpoint=True)


def derive_rng(global_seed: int, round: int, client_id: int, purpose: str) -> RngStream:
    """Stream for one ``(round, client, purpose)`` cell of a run.

    Use ``client_id=SERVER_ID`` for server-side draws (selection, evaluation).
    """
    return RngStream(global_seed, (int(round), int(client_id), str(purpose)))
