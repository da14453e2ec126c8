"""Adam with a cosine-annealed learning rate.

The optimizer only touches parameters whose gradients are passed in; a
parameter absent from the grads dict keeps its value, moments and step
count bitwise unchanged.  That is what makes weight-sharing isolation
hold: an update through one architecture cannot perturb option weights
the architecture never used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, ShapeError


@dataclass
class OptimizerState:
    """Cosine schedule descriptor plus per-parameter Adam accumulators."""

    lr_init: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray, int]] = field(default_factory=dict)


def cosine_lr(state: OptimizerState, t: int) -> float:
    """Annealed rate eta * 0.5 * (1 + cos(pi * t / T))."""
    if t < 0 or t > state.total_steps:
        raise ContractError(f"schedule step {t} outside [0, {state.total_steps}]")
    if state.total_steps == 0:
        return state.lr_init
    return state.lr_init * 0.5 * (1.0 + math.cos(math.pi * t / state.total_steps))


def adam_step(
    state: OptimizerState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
) -> None:
    """Apply one bias-corrected Adam update in place at the scheduled rate."""
    lr = cosine_lr(state, state.step)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m, v, t = state.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
        t += 1
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.moments[name] = (m, v, t)
    state.step += 1
    if state.step > state.total_steps:
        raise ContractError(
            f"optimizer stepped {state.step} times, schedule covers {state.total_steps}"
        )
