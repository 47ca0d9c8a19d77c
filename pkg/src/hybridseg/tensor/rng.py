"""Caller-owned random stream backed by PCG64 (O'Neill's permuted congruential generator).

The full generator state is four 64-bit words plus the buffered-uint32
pair that numpy keeps, so it serializes to a short int64 vector.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _to_signed(u: int) -> int:
    return u - (1 << 64) if u >= (1 << 63) else u


def _to_unsigned(s: int) -> int:
    return s & _MASK64


class Rng:
    def __init__(self, seed: int = 0, *, _bitgen: np.random.PCG64 | None = None):
        self._bitgen = _bitgen if _bitgen is not None else np.random.PCG64(np.random.SeedSequence(seed))
        self._gen = np.random.Generator(self._bitgen)

    @classmethod
    def derive(cls, seed: int, *key: int) -> "Rng":
        """Independent stream for ``(seed, key...)``; used for per-index work."""
        ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
        return cls(_bitgen=np.random.PCG64(ss))

    # -- draws ------------------------------------------------------------
    def random(self, shape=None, dtype=np.float32) -> np.ndarray:
        return self._gen.random(shape, dtype=dtype)

    def uniform(self, low: float, high: float, shape=None, dtype=np.float32):
        out = self._gen.uniform(low, high, shape)
        return out.astype(dtype) if shape is not None else float(out)

    def normal(self, shape=None, dtype=np.float32):
        out = self._gen.standard_normal(shape, dtype=dtype)
        return out

    def integers(self, low: int, high: int, shape=None):
        out = self._gen.integers(low, high, shape)
        return out if shape is not None else int(out)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, options):
        return options[int(self._gen.integers(0, len(options)))]

    # -- state ------------------------------------------------------------
    def get_state(self) -> np.ndarray:
        st = self._bitgen.state
        s, inc = st["state"]["state"], st["state"]["inc"]
        words = [s >> 64, s & _MASK64, inc >> 64, inc & _MASK64, st["has_uint32"], st["uinteger"]]
        return np.array([_to_signed(w) for w in words], dtype=np.int64)

    def set_state(self, words) -> None:
        w = [_to_unsigned(int(x)) for x in np.asarray(words, dtype=np.int64)]
        self._bitgen.state = {
            "bit_generator": "PCG64",
            "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
            "has_uint32": int(w[4]),
            "uinteger": int(w[5]),
        }

    @classmethod
    def from_state(cls, words) -> "Rng":
        rng = cls(0)
        rng.set_state(words)
        return rng

    def copy(self) -> "Rng":
        return Rng.from_state(self.get_state())
