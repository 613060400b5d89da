"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor, UsageError


@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], state: OptimState, lr: float | None = None) -> None:
    """One in-place AdamW update from the ``.grad`` of every parameter.

    Weight decay multiplies the parameter by ``1 - lr * wd`` before the Adam
    step, so it never enters the moment estimates.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"adamw_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v / bc2) + state.eps
        p.data -= (lr / bc1) * m / denom


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def lr_schedule(epoch: int, total: int, base_lr: float, warmup: int = 10) -> float:
    """Linear warmup ``(epoch + 1) / warmup * base_lr``, then cosine decay toward 0.

    Cosine progress is ``(epoch - warmup) / (total - warmup)``, so the last
    epoch still trains with a small positive rate.
    """
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    warmup = min(warmup, total)
    if epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    span = total - warmup
    progress = (epoch - warmup) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
