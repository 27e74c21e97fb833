"""Parameter containers.

A :class:`Module` owns leaf tensors (``requires_grad=True``) and child modules
as plain attributes; parameter names are dotted attribute paths.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def param(arr: np.ndarray, dtype=ag.DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Module:
    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, val in vars(self).items():
            if isinstance(val, (Tensor, Module)):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in self._children():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[full] = val
            else:
                out.update(val.named_parameters(full + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (64-bit mode exists for gradient checks)."""
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data.astype(dtype))
            p.grad = None
        return self


class Linear(Module):
    """``y = x @ weight + bias`` over the last axis; weight is [in, out]."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(cin)
        self.weight = param(rng.uniform(-bound, bound, size=(cin, cout)))
        self.bias = param(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        fan_in = cin * kernel * kernel
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, kernel, kernel)))
        self.bias = param(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def channel_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """LayerNorm over the channel axis of a [B, C, H, W] map."""
    t = ag.permute(x, (0, 2, 3, 1))
    return ag.permute(norm(t), (0, 3, 1, 2))
