"""Adam optimizer over named Parameters."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with bias correction; moment buffers are keyed by parameter name
    so they can ride along in checkpoints."""

    def __init__(self, named_params, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        names = [name for name, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.step_count
        correction2 = 1.0 - b2 ** self.step_count
        for name, p in self.named_params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def state_tensors(self):
        """Moment buffers as name -> array, for checkpointing."""
        out = {}
        for name, _ in self.named_params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors, step_count: int):
        for name, p in self.named_params:
            m = tensors.get(f"adam.m.{name}")
            v = tensors.get(f"adam.v.{name}")
            if m is None or v is None:
                raise ValueError(f"checkpoint is missing optimizer state for {name!r}")
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"optimizer state shape mismatch for {name!r}")
            self.m[name] = m.astype(np.float32).copy()
            self.v[name] = v.astype(np.float32).copy()
        self.step_count = step_count
