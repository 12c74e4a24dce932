"""SGD with momentum and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def cosine_anneal_lr(base_lr: float, min_lr: float, epoch: int, total_epochs: int) -> float:
    """Learning rate at ``epoch`` of a single cosine cycle.

    Epochs past ``total_epochs`` clamp to ``min_lr``.
    """
    if total_epochs <= 0:
        raise ValueError(f"total_epochs must be positive, got {total_epochs}")
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    if min_lr > base_lr:
        raise ValueError(f"min_lr {min_lr} exceeds base_lr {base_lr}")
    if epoch == 0:
        return base_lr
    if epoch >= total_epochs:
        return min_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class OptimizerState:
    momentum: float = 0.9
    base_lr: float = 0.001
    min_lr: float = 0.0
    total_epochs: int = 1
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ValueError(f"need 0 <= min_lr <= base_lr and base_lr > 0, "
                             f"got base_lr={self.base_lr}, min_lr={self.min_lr}")

    @property
    def lr(self) -> float:
        return cosine_anneal_lr(self.base_lr, self.min_lr, self.epoch, self.total_epochs)

    def grow(self, name: str, shape: tuple[int, ...]) -> None:
        """Zero-pad a velocity buffer after its parameter was widened."""
        old = self.velocity.get(name)
        if old is None:
            return
        new = np.zeros(shape)
        new[tuple(slice(0, d) for d in old.shape)] = old
        self.velocity[name] = new


def sgd_momentum_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """One in-place update: ``v = momentum * v + g``; ``theta -= lr * v``."""
    lr = state.lr
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ValueError(f"sgd_momentum_step: parameter {name!r} has no gradient")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.values)
        elif v.shape != p.shape:
            raise ValueError(f"sgd_momentum_step: velocity {v.shape} does not match "
                             f"parameter {name!r} {p.shape}")
        v = state.momentum * v + p.grad
        state.velocity[name] = v
        p.values = p.values - lr * v
