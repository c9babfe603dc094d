"""Shared hash keys for the sketch encoder.

Stands in for the parties' collaborative key agreement: the harness holds a
``KeyOracle`` built from a master seed and hands each party a ``KeyRing``.
Keys are addressed by opaque integer ids; only the id travels in messages.
The server side never receives a ring.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = (np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)) & _MASK
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class UnknownKey(KeyError):
    pass


class KeyRing:
    """Party-side view of the shared keys."""

    __slots__ = ("_keys",)

    def __init__(self, keys: dict[int, int]):
        self._keys = dict(keys)

    @property
    def key_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self._keys))

    def secret(self, key_id: int) -> np.uint64:
        try:
            return np.uint64(self._keys[int(key_id)])
        except KeyError:
            raise UnknownKey(f"hash key {key_id} is not registered") from None

    def secrets(self, key_ids) -> np.ndarray:
        return np.array([self.secret(k) for k in key_ids], dtype=np.uint64)

    def hash_uniform(self, element_ids, key_ids) -> np.ndarray:
        """Keyed hash of every (element, key) pair mapped into (0, 1).

        Returns an array of shape ``(len(element_ids), len(key_ids))``.
        """
        ids = np.asarray(element_ids, dtype=np.uint64).reshape(-1, 1)
        keys = self.secrets(np.atleast_1d(key_ids)).reshape(1, -1)
        with np.errstate(over="ignore"):
            z = _splitmix64(_splitmix64(ids) ^ keys)
        return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53

    def __repr__(self):
        return f"KeyRing({len(self._keys)} keys)"


class KeyOracle:
    """Derives ``t`` distinct secret keys from a master seed."""

    def __init__(self, master_seed: int, t: int):
        if t < 1:
            raise ValueError("need at least one key")
        state = np.random.SeedSequence(int(master_seed)).generate_state(t, dtype=np.uint64)
        self._keys = {i: int(k) for i, k in enumerate(state)}
        if len(set(self._keys.values())) != t:  # pragma: no cover - 2^-64 odds
            raise RuntimeError("key collision; pick another master seed")

    @property
    def key_ids(self) -> tuple[int, ...]:
        return tuple(self._keys)

    def ring(self) -> KeyRing:
        return KeyRing(self._keys)
