"""Central finite-difference oracle for gradient verification.

The loss callable must be deterministic and must build its forward pass
with the ambient tape context (i.e. it must not open a Tape of its own):
the checker records one taped pass for analytic gradients, then re-evaluates
the loss value-only under ``no_grad`` for the difference quotients.
"""

from __future__ import annotations

from typing import Callable

from .params import ParameterStore
from .tensor import Tape, Tensor, backward, no_grad

REL_ERR_DENOM_FLOOR = 1e-8


def finite_diff_check_blocks(
    f: Callable[[], Tensor],
    params: ParameterStore,
    h: float = 1e-5,
) -> dict[str, float]:
    """Per-block max relative error between analytic and central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8) so that
    near-zero gradients are compared absolutely.
    """
    if h <= 0.0:
        raise ValueError(f"step size must be positive, got {h}")
    params.zero_grads()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = {name: t.grad.copy() for name, t in params.items()}
    params.zero_grads()

    report: dict[str, float] = {}
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            grads = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f().item()
                flat[i] = orig - h
                f_minus = f().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = grads[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERR_DENOM_FLOOR)
                if err > worst:
                    worst = err
            report[name] = worst
    return report


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParameterStore,
    h: float = 1e-5,
) -> float:
    """Max relative error across every coordinate of every parameter block."""
    report = finite_diff_check_blocks(f, params, h)
    return max(report.values(), default=0.0)
