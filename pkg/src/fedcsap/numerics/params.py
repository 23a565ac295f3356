"""Named, ordered collections of trainable tensors and the SGD update."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor


class ParameterStore:
    """Ordered mapping name -> trainable Tensor.

    Registration order is preserved and is the iteration order everywhere
    (updates, aggregation, serialization), which is what makes training and
    checkpoints byte-reproducible.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def n_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy(self) -> "ParameterStore":
        """Deep copy with fresh zeroed gradient buffers."""
        dup = ParameterStore()
        for name, t in self._params.items():
            dup.register(name, Tensor(t.data, requires_grad=True))
        return dup

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            raise KeyError(
                f"parameter names differ: have {sorted(self._params)}, got {sorted(arrays)}"
            )
        for name, t in self._params.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r}: stored {src.shape} vs expected {t.data.shape}")
            t.data[...] = src


def sgd_step(params: ParameterStore, lr: float) -> None:
    """p <- p - lr * grad for every parameter, then zero all gradients."""
    lr = float(lr)
    for t in params.tensors():
        t.data -= lr * t.grad
    params.zero_grads()
