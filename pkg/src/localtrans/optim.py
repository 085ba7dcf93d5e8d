"""Adam with a serialisable state."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor.core import NumericalError, Parameter


class Adam:
    def __init__(
        self,
        named_params: Iterable[tuple[str, Parameter]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.named = list(named_params)
        names = [n for n, _ in self.named]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.named:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {name}")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.named:
            m, v, g = self.m[name], self.v[name], p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"adam.t": np.array([float(self.t)]), "adam.lr": np.array([self.lr])}
        for name in self.m:
            state[f"adam.m.{name}"] = self.m[name]
            state[f"adam.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"][0])
        self.lr = float(state["adam.lr"][0])
        for name in self.m:
            self.m[name][...] = state[f"adam.m.{name}"]
            self.v[name][...] = state[f"adam.v.{name}"]
