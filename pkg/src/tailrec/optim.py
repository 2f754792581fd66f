"""Adam with linear learning-rate warmup and decoupled-from-loss L2 decay.

The L2 term is applied inside the optimizer as a gradient penalty
``g + l2 * p`` rather than added to the loss, so loss values reported during
training are pure data terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "effective_lr"]


@dataclass
class AdamState:
    """Per-parameter-list optimizer state.

    ``t`` counts completed steps; the warmup factor for the step being taken
    is ``min((t+1)/warmup_steps, 1)`` so the very first step already moves
    the parameters.
    """

    peak_lr: float
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2_coefficient: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def _ensure(self, params: list[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.values) for p in params]
            self.v = [np.zeros_like(p.values) for p in params]
        elif len(self.m) != len(params):
            raise ValueError(
                f"optimizer state tracks {len(self.m)} parameters, got {len(params)}"
            )


def effective_lr(state: AdamState) -> float:
    """Learning rate that the *next* call to adam_step will use."""
    if state.warmup_steps <= 0:
        return state.peak_lr
    return state.peak_lr * min((state.t + 1) / state.warmup_steps, 1.0)


def adam_step(state: AdamState, params: list[Tensor]) -> None:
    """One in-place Adam update over ``params`` using their ``.grad`` buffers.

    A parameter with ``grad=None`` is treated as having zero gradient (it
    still decays under L2 and its moments update). If any gradient contains
    a non-finite value the step aborts atomically before touching state.
    """
    state._ensure(params)
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; step aborted")
        grads.append(g)

    lr = effective_lr(state)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.l2_coefficient:
            g = g + state.l2_coefficient * p.values
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.values -= lr * mhat / (np.sqrt(vhat) + state.epsilon)
