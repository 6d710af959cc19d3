"""Splittable counter-based random number generation.

All stochastic behaviour in the package (weight init, dropout, teacher
forcing, data synthesis) draws from `Rng` objects so that every run is
reproducible from a single integer seed.  Streams are derived by name,
so adding a new consumer never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng"]


def _derive_key(seed: int, path: tuple[str, ...]) -> int:
    """Map (seed, split path) to a 128-bit Philox key, stable across runs."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for tag in path:
        h.update(b"/")
        h.update(tag.encode())
    return int.from_bytes(h.digest()[:16], "little")


class Rng:
    """Counter-based generator (Philox) with named, independent splits.

    `split("dropout")` returns a child stream whose values depend only on
    the root seed and the split path, never on how much the parent has
    been consumed.
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(seed, _path)))

    def split(self, tag: str) -> "Rng":
        return Rng(self.seed, self.path + (str(tag),))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size=size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        """JSON-serializable snapshot; restores bit-exactly via set_state."""
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.path = tuple(state["path"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(int(state["seed"]), tuple(state["path"]))
        rng.set_state(state)
        return rng
