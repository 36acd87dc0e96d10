"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from adnet.tensor.tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    seconds: float = 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """Relative error; ``floor`` keeps exactly-zero gradients from amplifying round-off."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               max_entries: int | None = None, seed: int = 0, name: str = "fn") -> GradCheckResult:
    """Compare backprop gradients of scalar ``fn()`` against central differences.

    ``inputs`` must be float64 leaves with ``requires_grad``. When
    ``max_entries`` is set, only that many randomly chosen coordinates per
    input are perturbed (full models have too many parameters to sweep).
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, rel_error(float(ga.reshape(-1)[i]), numeric))
            count += 1
    return GradCheckResult(name=name, max_rel_error=worst, checked=count)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalarize ``out`` with fixed random weights so every output entry matters."""
    return (out * Tensor(weights.astype(out.dtype))).sum()
