"""Adam with optional decoupled weight decay, operating on leaf tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam / AdamW. ``weight_decay`` is decoupled (AdamW) when nonzero.

    ``beta1 = 0`` turns the first moment into the raw gradient, which is the
    setting used for every generator and critic here.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.0, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0, grad_clip: float | None = None):
        if lr < 0 or eps <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1) or weight_decay < 0:
            raise ValueError(f"invalid optimizer settings lr={lr} betas=({beta1}, {beta2}) eps={eps} "
                             f"weight_decay={weight_decay}")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values()
                                 if p.grad is not None)))

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        scale = 1.0
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * update

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.m/{k}": v for k, v in self.m.items()}
        out.update({f"{prefix}.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"{prefix}.m/{k}"])
            self.v[k] = np.array(arrays[f"{prefix}.v/{k}"])
        self.step_count = int(step_count)
