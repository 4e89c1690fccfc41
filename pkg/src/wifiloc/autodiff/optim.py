from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Adam:
    """Adam with bias correction over an ordered list of parameter tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr == 0:
                continue
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(optimizer):
    """One Adam update; unlike ``Adam.step`` this refuses a non-positive rate."""
    if optimizer.lr <= 0:
        raise ValueError("learning rate must be positive")
    optimizer.step()


@dataclass
class PlateauSchedule:
    """Halve the learning rate of the attached optimizers after ``patience`` stale epochs."""

    optimizers: list = field(default_factory=list)
    patience: int = 10
    factor: float = 0.5
    best_val_loss: float = float("inf")
    stale_count: int = 0

    def step(self, val_loss):
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.stale_count = 0
            return False
        self.stale_count += 1
        if self.stale_count >= self.patience:
            for opt in self.optimizers:
                opt.lr *= self.factor
            self.stale_count = 0
            return True
        return False


def plateau_step(schedule, val_loss):
    return schedule.step(val_loss)


def alpha_schedule(epochs, alpha0=0.0, step=1e-4):
    """GRL coefficient for each epoch, 0-based: alpha0 + step * epoch."""
    return [round(alpha0 + step * e, 12) for e in range(epochs)]
