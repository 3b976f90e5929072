"""Adam with bias correction."""

from __future__ import annotations

import numpy as np

from .layers import Parameter


class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    """One optimizer state shared across all steps of a run.

    Gradients are zeroed after every step.  A non-finite gradient raises
    :class:`NonFiniteGradientError` naming the parameter before anything is
    updated.
    """

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in layer {p.name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype, copy=False)
            p.grad[...] = 0

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"{p.name}.m"] = m
            out[f"{p.name}.v"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray], t: int):
        for p, m, v in zip(self.params, self.m, self.v):
            m[...] = state[f"{p.name}.m"]
            v[...] = state[f"{p.name}.v"]
        self.t = int(t)
