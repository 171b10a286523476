"""Central finite-difference checking of backward gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], which: int,
                   step: float = 1e-5) -> np.ndarray:
    x = inputs[which]
    out = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(*inputs).item()
        flat[i] = orig - step
        fm = fn(*inputs).item()
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * step)
    return out


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               analytic: Sequence[np.ndarray] | None = None) -> GradCheckReport:
    """Compare backward gradients of scalar ``fn(*inputs)`` with central differences.

    Inputs that do not require grad are held constant. ``analytic`` overrides the
    backward gradients, which is how the harness's own sensitivity is tested.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    if analytic is None:
        loss.backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    errors = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        num = numerical_grad(fn, inputs, i, step)
        errors.append(float(rel_error(np.asarray(analytic[i], dtype=np.float64), num).max()))
    return GradCheckReport(max(errors, default=0.0), errors)
