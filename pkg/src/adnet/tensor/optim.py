"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from adnet.errors import DimensionError
from adnet.tensor.tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
               lr: float | None = None) -> None:
    """Apply one AdamW update to ``params`` in place and advance ``state.t``.

    Parameters with a ``None`` gradient are still decayed, matching the
    behaviour of treating a missing gradient as zero.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise DimensionError(f"optimizer state tracks {len(state.m)} parameters, got {len(params)}")
    lr = state.learning_rate if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise DimensionError(f"moment shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class AdamW:
    """Thin stateful wrapper binding :func:`adamw_step` to a parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.state = OptimizerState(learning_rate=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay)

    def step(self, lr: float | None = None) -> None:
        adamw_step(self.state, [p.data for p in self.params], [p.grad for p in self.params], lr=lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    initial_lr: float = 3e-4
    final_lr: float = 1e-6


def cosine_lr(schedule: LrSchedule, t: int) -> float:
    """Cosine annealing from ``initial_lr`` at t=0 to ``final_lr`` at ``total_steps``.

    ``t`` outside ``[0, total_steps]`` is clamped to the nearest endpoint.
    """
    total = max(int(schedule.total_steps), 1)
    t = min(max(t, 0), total)
    span = schedule.initial_lr - schedule.final_lr
    return schedule.final_lr + 0.5 * span * (1.0 + math.cos(math.pi * t / total))
