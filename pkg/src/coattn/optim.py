from __future__ import annotations

from collections import OrderedDict
from typing import Dict

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Adam with bias correction over a fixed, named parameter set."""

    def __init__(self, named_params: Dict[str, Tensor], lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = OrderedDict(named_params)
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.step_count = 0
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in parameter '{name}'")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def state_tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, stored, step_count: int) -> None:
        for name in self.params:
            self.m[name][...] = stored[f"m.{name}"]
            self.v[name][...] = stored[f"v.{name}"]
        self.step_count = step_count

