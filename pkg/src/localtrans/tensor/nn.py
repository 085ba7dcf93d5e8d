"""Small layer containers on top of the functional ops."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .core import Parameter, Tensor, get_default_dtype


class Module:
    """Holds parameters, buffers and child modules under dotted names."""

    def __init__(self):
        self.training = True
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_parameter(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(value, name=name)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        buf = np.array(value, dtype=get_default_dtype())
        self._buffers[name] = buf
        return buf

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if strict and missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, value in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            elif strict:
                raise KeyError(f"unexpected entry {name!r} in checkpoint")
            else:
                continue
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {target.shape}")
            target[...] = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv3x3(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = self.add_parameter("weight", kaiming_uniform(rng, (cout, cin, 3, 3), 9 * cin))
        self.bias = self.add_parameter("bias", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class Conv1x1(Module):
    def __init__(self, cin: int, cout: int, rng: Optional[np.random.Generator], bias: bool = False):
        super().__init__()
        w = np.zeros((cout, cin, 1, 1)) if rng is None else kaiming_uniform(rng, (cout, cin, 1, 1), cin)
        self.weight = self.add_parameter("weight", w)
        self.bias = self.add_parameter("bias", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1x1(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_parameter("gamma", np.ones(channels))
        self.beta = self.add_parameter("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        # the batchnorm shift makes a conv bias redundant
        self.conv = self.add_child("conv", Conv3x3(cin, cout, rng, bias=False))
        self.bn = self.add_child("bn", BatchNorm(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))
