"""Named parameter storage shared by the network, optimizer and serializers."""
from __future__ import annotations

from collections.abc import Mapping
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .tensor import Rng, Tensor


class ParameterStore(Mapping):
    """Ordered name -> Tensor map; iteration is lexicographic by name.

    Trainable tensors have ``requires_grad`` set. Non-trainable entries
    (batch-norm running statistics) live in the same namespace so a single
    archive captures the full model state.
    """

    def __init__(self, config=None):
        self._tensors: dict[str, Tensor] = {}
        self.config = config

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"parameter {name!r} registered twice")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = trainable
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def trainable(self) -> list[str]:
        return [n for n in self if self._tensors[n].requires_grad]

    def num_parameters(self, trainable_only: bool = True) -> int:
        names = self.trainable() if trainable_only else list(self)
        return int(sum(self._tensors[n].size for n in names))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self._tensors[n].data.copy() for n in self}

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.config)
        for n in self:
            t = self._tensors[n]
            out.add(n, Tensor(t.data.astype(dtype), dtype=dtype), trainable=t.requires_grad)
        return out

    def copy(self) -> "ParameterStore":
        return self.astype(self.dtype())

    def dtype(self):
        first = next(iter(self._tensors.values()), None)
        return first.dtype if first is not None else np.float32

    def equal(self, other: "ParameterStore") -> bool:
        """Bitwise equality of names, trainability and contents."""
        if list(self) != list(other):
            return False
        for n in self:
            a, b = self._tensors[n], other[n]
            if a.requires_grad != b.requires_grad or a.dtype != b.dtype or not np.array_equal(a.data, b.data):
                return False
        return True


class Scope(Mapping):
    """Read view of a ParameterStore under a dotted prefix."""

    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._full(name)]

    def __contains__(self, name) -> bool:
        return self._full(name) in self.store._tensors

    def __iter__(self):
        head = self.prefix + "."
        return (n[len(head):] for n in self.store if n.startswith(head))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, self._full(name))

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        return self.store.add(self._full(name), value, trainable)


def he_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / max(fan_in, 1)))
    return rng.uniform(-bound, bound, tuple(shape), dtype=np.float32)
