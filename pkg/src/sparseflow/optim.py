"""Adam with linear learning-rate warmup for tape-trained parameters."""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .numerics import Tensor


class Adam:
    """Adam (Kingma & Ba) over a fixed list of parameters.

    The effective learning rate ramps linearly from 0 over ``warmup_steps``
    steps, then stays at ``lr``, or follows a cosine anneal toward
    ``lr * min_lr_ratio`` when ``decay_steps`` is set. ``step`` consumes the
    gradients currently stored on the parameters and clears them.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 warmup_steps: int = 0, decay_steps: int = 0,
                 min_lr_ratio: float = 0.05):
        if lr < 0.0:
            raise DomainError(f"lr must be nonnegative, got {lr}")
        if not all(p.requires_grad for p in params):
            raise DomainError("all optimized tensors must require grad")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.decay_steps = decay_steps
        self.min_lr_ratio = min_lr_ratio
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def effective_lr(self) -> float:
        """Learning rate that the *next* call to step will apply."""
        t = self.t + 1
        if self.warmup_steps > 0 and t <= self.warmup_steps:
            return self.lr * t / self.warmup_steps
        if self.decay_steps > 0:
            frac = min(max(t - self.warmup_steps, 0)
                       / max(self.decay_steps - self.warmup_steps, 1), 1.0)
            floor = self.lr * self.min_lr_ratio
            return floor + (self.lr - floor) * 0.5 * (1.0 + np.cos(np.pi * frac))
        return self.lr

    def step(self) -> None:
        lr = self.effective_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
