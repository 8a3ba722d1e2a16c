"""Adam with optional cosine learning-rate decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine_decay: bool = False
    total_steps: int = 1
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def effective_lr(self, step: int | None = None) -> float:
        """Learning rate used for the update taken at 0-based ``step``."""
        s = self.step if step is None else step
        if not self.cosine_decay:
            return self.lr
        frac = min(s, self.total_steps) / self.total_steps
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Return updated parameter arrays; moment buffers in ``state`` are advanced in place."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    lr = state.effective_lr()
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs grad {g.shape}")
        m = state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append((p - update).astype(p.dtype))
    return out


class Adam:
    """Stateful wrapper that writes updates back into the parameter tensors."""

    def __init__(self, params: list[Tensor], **kwargs):
        self.params = list(params)
        self.state = AdamState(**kwargs)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        gl = [grads.get(p) if grads.get(p) is not None else np.zeros_like(p.data) for p in self.params]
        for p, new in zip(self.params, adam_step(self.state, [p.data for p in self.params], gl)):
            p.data = new


def clip_grad_norm(grads: dict[Tensor, np.ndarray], max_norm: float | None) -> float:
    """Scale gradients in place so their global l2 norm is at most ``max_norm``; returns the original norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total
