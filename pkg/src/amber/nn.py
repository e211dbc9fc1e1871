"""Parameter containers and the layer classes the model is assembled from.

Initialization draws from a caller-supplied SplitMix64 stream in attribute
declaration order, so a fixed seed fixes every weight regardless of how
many layers a configuration instantiates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .rng import SplitMix64
from .tensor import Tensor

__all__ = ["Module", "Linear", "LayerNorm", "Conv2d", "Conv3d", "ConvSpec"]


def _fan_in_uniform(rng: SplitMix64, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform_array(shape, -limit, limit).astype(np.float32)


class Module:
    """Base class; discovers parameters from attributes in declaration order.

    Attributes holding a ``Tensor`` with ``requires_grad`` are parameters;
    ``Module`` attributes and lists of modules recurse.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in self.__dict__.items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={missing}, unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def astype(self, dtype) -> "Module":
        """In-place precision cast of every parameter (used by the FD harness)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    """Affine map over the last axis; weight shape (c_in, c_out)."""

    def __init__(self, c_in: int, c_out: int, rng: SplitMix64, bias: bool = True):
        self.c_in = c_in
        self.c_out = c_out
        self.weight = Tensor(_fan_in_uniform(rng, (c_in, c_out), c_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-6):
        self.c = c
        self.eps = eps
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a convolution; validates the output-extent rule."""

    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    in_channels: int
    out_channels: int

    def __post_init__(self):
        k = len(self.kernel)
        if len(self.stride) != k or len(self.padding) != k:
            raise ValueError("kernel/stride/padding rank mismatch")
        if any(v < 1 for v in self.kernel) or any(v < 1 for v in self.stride):
            raise ValueError("kernel and stride entries must be >= 1")
        if any(v < 0 for v in self.padding):
            raise ValueError("padding entries must be >= 0")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def out_extents(self, spatial: tuple[int, ...]) -> tuple[int, ...]:
        out = tuple((n + 2 * p - k) // s + 1
                    for n, k, s, p in zip(spatial, self.kernel, self.stride, self.padding))
        if any(o < 1 for o in out):
            raise ValueError(f"spec {self} gives non-positive output for input {spatial}")
        return out


def _norm_tuple(v, k: int) -> tuple[int, ...]:
    return (v,) * k if isinstance(v, int) else tuple(int(i) for i in v)


class _ConvNd(Module):
    def __init__(self, ndim: int, c_in: int, c_out: int, kernel, rng: SplitMix64,
                 stride=1, padding=0, groups: int = 1, bias: bool = True):
        kernel = _norm_tuple(kernel, ndim)
        self.spec = ConvSpec(kernel, _norm_tuple(stride, ndim), _norm_tuple(padding, ndim),
                             c_in, c_out)
        if c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide both channel counts")
        self.groups = groups
        fan_in = (c_in // groups) * int(np.prod(kernel))
        wshape = (c_out, c_in // groups) + kernel
        self.weight = Tensor(_fan_in_uniform(rng, wshape, fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F._conv_nd(x, self.weight, self.bias,
                          self.spec.stride, self.spec.padding, self.groups)


class Conv2d(_ConvNd):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, groups=1, bias=True):
        super().__init__(2, c_in, c_out, kernel, rng, stride, padding, groups, bias)


class Conv3d(_ConvNd):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, groups=1, bias=True):
        super().__init__(3, c_in, c_out, kernel, rng, stride, padding, groups, bias)
