"""Parameter containers and the basic layers blocks are built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from adnet.errors import DimensionError
from adnet.tensor import Tensor, conv2d, layer_norm


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Base class; trainable tensors are attributes with ``requires_grad=True``.

    Fixed numpy arrays stored as attributes (e.g. filter banks) are constants
    and never show up in :meth:`named_parameters`.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise DimensionError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if in_channels % groups or out_channels % groups:
            raise DimensionError(f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        fan_in = in_channels // groups * kernel_size * kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups
        self.weight = parameter(_uniform(rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in))
        self.bias = parameter(_uniform(rng, (out_channels,), fan_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)


class LayerNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.eps = eps
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, eps=self.eps)
