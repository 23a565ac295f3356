"""Forward operations with reverse-mode backward rules.

Every op validates shapes eagerly (errors name the offending shapes),
checks output finiteness at the operation boundary, and records a
backward closure onto the active tape when any input participates in
gradient tracking. Broadcasting is deliberately restricted: binary
elementwise ops accept equal shapes or one scalar operand, nothing else,
which keeps each backward rule a one-liner that can be audited against
the finite-difference oracle.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    active_tape,
    finiteness_checks_enabled,
)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if finiteness_checks_enabled() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, track)
    if track:
        tape._record(op, out, backward_fn)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal and neither is scalar")


def _acc(t: Tensor, g: np.ndarray) -> None:
    # Accumulate a gradient contribution, collapsing a scalar operand's grad.
    if not t.requires_grad:
        return
    if t.data.shape == g.shape:
        t.grad += g
    else:
        t.grad += np.sum(g).reshape(t.data.shape)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _emit("matmul", out, (a, b), bw)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 operand, got {x.shape}")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.T

    return _emit("transpose", x.data.T.copy(), (x,), bw)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)

    def bw(g: np.ndarray) -> None:
        _acc(a, g)
        _acc(b, g)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)

    def bw(g: np.ndarray) -> None:
        _acc(a, g)
        _acc(b, -g)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)

    def bw(g: np.ndarray) -> None:
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _emit("mul", a.data * b.data, (a, b), bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += c * g

    return _emit("scale", c * x.data, (x,), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0  # subgradient at exactly 0 is 0

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * mask

    return _emit("relu", np.where(mask, x.data, 0.0), (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    out = np.where(v >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * out * (1.0 - out)

    return _emit("sigmoid", out, (x,), bw)


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)  # sign(0) = 0, matching the relu subgradient convention

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * sign

    return _emit("abs", np.abs(x.data), (x,), bw)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError(f"reshape {x.shape} -> {shape} changes element count")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.reshape(x.data.shape)

    return _emit("reshape", x.data.reshape(shape).copy(), (x,), bw)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    ndim = parts[0].data.ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat axis {axis} invalid for rank {ndim}")
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g: np.ndarray) -> None:
        index = [slice(None)] * ndim
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index[axis] = slice(start, stop)
                p.grad += g[tuple(index)]

    return _emit("concat", out, parts, bw)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a rank-2 operand, got {x.shape}")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {x.shape}")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad[:, start:stop] += g

    return _emit("slice_cols", x.data[:, start:stop].copy(), (x,), bw)


def add_rowvec(x, v) -> Tensor:
    """Add a length-d vector to every row of a (B, d) matrix."""
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} + {v.shape}")

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g
        if v.requires_grad:
            v.grad += g.sum(axis=0)

    return _emit("add_rowvec", x.data + v.data[None, :], (x, v), bw)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(x: Tensor, axes) -> tuple:
    if axes is None:
        return tuple(range(x.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"reduction axes {axes} are not distinct")
    for a in axes:
        if not 0 <= a < x.data.ndim:
            raise ShapeError(f"reduction axis {a} invalid for shape {x.shape}")
    return axes


def _reduce(op: str, x, axes) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(x, axes)
    if not axes:  # empty selection: identity
        def bw_id(g: np.ndarray) -> None:
            if x.requires_grad:
                x.grad += g

        return _emit(op, x.data.copy(), (x,), bw_id)

    count = math.prod(x.shape[a] for a in axes)
    if op == "sum":
        out = x.data.sum(axis=axes)
    else:
        out = x.data.mean(axis=axes)

    def bw(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        expanded = np.expand_dims(g, axes)
        contrib = np.broadcast_to(expanded, x.data.shape)
        x.grad += contrib / count if op == "mean" else contrib

    return _emit(op, out, (x,), bw)


def reduce_sum(x, axes=None) -> Tensor:
    return _reduce("sum", x, axes)


def reduce_mean(x, axes=None) -> Tensor:
    return _reduce("mean", x, axes)


# ---------------------------------------------------------------------------
# normalizations


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    axis = axis % x.data.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _emit("softmax", out, (x,), bw)


def log_softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {x.shape}")
    axis = axis % x.data.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return _emit("log_softmax", out, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine-map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0.0:
        raise ShapeError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bw(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        if beta.requires_grad:
            beta.grad += g.sum(axis=lead)
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=lead)
        if x.requires_grad:
            gg = g * gamma.data
            x.grad += inv * (
                gg
                - gg.mean(axis=-1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
            )

    return _emit("layer_norm", out, (x, gamma, beta), bw)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit norm; an all-zero row maps to zero (eps guard)."""
    x = as_tensor(x)
    if eps <= 0.0:
        raise ShapeError(f"l2_normalize eps must be positive, got {eps}")
    sq = (x.data * x.data).sum(axis=-1, keepdims=True)
    denom = np.sqrt(sq + eps * eps)
    out = x.data / denom

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * x.data).sum(axis=-1, keepdims=True)
            x.grad += g / denom - x.data * (dot / denom**3)

    return _emit("l2_normalize", out, (x,), bw)
