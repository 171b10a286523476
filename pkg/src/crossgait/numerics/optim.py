"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], learning_rate: float = 1e-3) -> "OptimizerState":
        state = cls(learning_rate=learning_rate)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], state: OptimizerState,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              lr: float | None = None) -> None:
    """Update ``params`` in place from their ``.grad`` buffers."""
    if set(params) != set(state.first_moment):
        raise ContractError("optimizer moments do not match the parameter set")
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {', '.join(sorted(missing))}")
    if lr is not None:
        state.learning_rate = lr
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad.astype(p.dtype, copy=False)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
