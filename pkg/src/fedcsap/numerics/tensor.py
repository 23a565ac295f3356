"""Dense float64 tensors with an explicit reverse-mode gradient tape.

Forward operations (see :mod:`fedcsap.numerics.ops`) record onto the
innermost active :class:`Tape` for the current thread. Calling
:func:`backward` replays the records in reverse, accumulating gradients
into the ``grad`` buffer of every tensor that requires one. Distinct
threads may each run their own tape concurrently; a single tape is not
thread-safe.

Tensors are row-major float64 throughout. Gradient buffers exist exactly
for tensors with ``requires_grad=True`` and are zero-initialised, so a
parameter that never enters the graph reports a gradient of exactly zero.
Tensor data is treated as immutable after creation except for the
optimizer update in :func:`fedcsap.numerics.params.sgd_step`.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared at an operation boundary."""


class TapeError(RuntimeError):
    """Gradient-tape misuse: consumed tape, foreign loss, non-scalar loss."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


_CHECK_FINITE = True


def set_finiteness_checks(enabled: bool) -> bool:
    """Toggle per-operation output finiteness checks; returns the old value."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


def finiteness_checks_enabled() -> bool:
    return _CHECK_FINITE


class Tensor:
    """A dense n-dimensional float64 array, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal: adopt an array we own without re-copying. Unlike
        # ascontiguousarray this keeps 0-d scalars 0-d.
        t = cls.__new__(cls)
        t.data = np.array(arr, dtype=np.float64, order="C", copy=None)
        t.requires_grad = requires_grad
        t.grad = np.zeros_like(t.data) if requires_grad else None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detached(self) -> "Tensor":
        """A  requires_grad=False copy that shares no buffers."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Thin arithmetic sugar; the op functions carry the real semantics.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


class _Record:
    __slots__ = ("op", "output", "backward_fn")

    def __init__(self, op: str, output: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.op = op
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of forward operations, replayed once by backward()."""

    def __init__(self):
        self._records: list[_Record] = []
        self._output_ids: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        top = _tape_stack().pop()
        if top is not self:  # pragma: no cover - indicates nesting misuse
            raise TapeError("tape context exited out of order")

    def _record(self, op: str, output: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        if self._consumed:
            raise TapeError("recording onto a consumed tape; build a fresh forward pass")
        self._records.append(_Record(op, output, backward_fn))
        self._output_ids.add(id(output))

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._output_ids

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        """Discard all records so the tape can host a fresh forward pass."""
        self._records.clear()
        self._output_ids.clear()
        self._consumed = False


class no_grad:
    """Context manager suppressing tape recording for the enclosed ops."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()


# Test-only fault injection: scales the output-gradient fed into one op's
# backward rule, proving the gradient checker catches a corrupted rule.
class backward_fault:
    def __init__(self, op: str, scale: float = 2.0):
        self.op = op
        self.scale = scale

    def __enter__(self):
        _local.fault = (self.op, self.scale)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.fault = None


def _active_fault():
    return getattr(_local, "fault", None)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad tensor on the tape.

    The loss must be a scalar produced by this tape, and each tape supports
    exactly one backward pass; call :meth:`Tape.reset` and rebuild the
    forward pass to differentiate again.
    """
    if tape._consumed:
        raise TapeError("backward called twice on the same tape without reset")
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.owns(loss):
        raise TapeError("loss was not produced by this tape")
    tape._consumed = True

    loss.grad[...] = loss.grad + 1.0
    fault = _active_fault()
    for rec in reversed(tape._records):
        g = rec.output.grad
        if fault is not None and rec.op == fault[0]:
            g = g * fault[1]
        rec.backward_fn(g)
