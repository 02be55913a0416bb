"""SGD with momentum, L2 weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradient(RuntimeError):
    pass


def cosine_lr(base_lr: float, t: float, total: float) -> float:
    """``base_lr * 0.5 * (1 + cos(pi * t / total))``."""
    if total <= 0:
        raise ValueError("total must be positive")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimizerState:
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epoch: int = 0
    total_epochs: int = 1
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.epoch, self.total_epochs)


def sgd_step(named_params, state: OptimizerState) -> float:
    """One in-place update; returns the learning rate used.

    ``v <- momentum * v + (grad + wd * p)``, ``p <- p - lr * v``.
    """
    lr = state.lr
    for name, p in named_params:
        if p.grad is None:
            raise MissingGradient(f"parameter {name!r} has no gradient")
        d = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        buf = state.buffers.get(name)
        if buf is None:
            buf = d.copy()
        else:
            if buf.shape != p.shape:
                raise ValueError(f"momentum buffer for {name!r} has shape {buf.shape}, expected {p.shape}")
            buf = state.momentum * buf + d
        state.buffers[name] = buf
        p.data = p.data - lr * buf
    return lr


class SGD:
    """Thin holder pairing named parameters with their :class:`OptimizerState`."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float, momentum: float = 0.9,
                 weight_decay: float = 5e-4, total_epochs: int = 1):
        self.named_params = list(named_params)
        self.state = OptimizerState(lr, momentum, weight_decay, 0, total_epochs)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> float:
        return sgd_step(self.named_params, self.state)

    def set_epoch(self, epoch: int) -> None:
        self.state.epoch = epoch
