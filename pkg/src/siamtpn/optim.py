"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One update at step ``t`` (1-based). Returns (param, m, v) as new arrays."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param = param * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            if p.grad is None:
                continue
            p.data, self.m[k], self.v[k] = adamw_step(
                p.data, p.grad, self.m[k], self.v[k], self.t, self.lr, b1, b2, self.eps, self.weight_decay
            )


def cosine_lr(step: int, total: int, base: float, floor: float = 0.0) -> float:
    """Cosine decay from ``base`` at step 0 to ``floor`` at ``total``."""
    if total <= 1:
        return base
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return floor + 0.5 * (base - floor) * (1.0 + np.cos(np.pi * frac))
