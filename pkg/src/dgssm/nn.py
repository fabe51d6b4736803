"""Parameter containers, a few layers, and SGD with momentum."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Collects parameters from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name].data if isinstance(state[name], Tensor) else state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype)


def param(arr, dtype) -> Tensor:
    return Tensor(np.array(arr, dtype=dtype), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype, gain: float = np.sqrt(2.0)) -> Tensor:
    return param(rng.standard_normal(shape) * gain / np.sqrt(fan_in), dtype)


def zeros(shape, dtype) -> Tensor:
    return param(np.zeros(shape), dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True, init: str = "he"):
        if init == "zero":
            self.weight = zeros((cout, cin, k, k), dtype)
        elif init == "identity":
            w = np.zeros((cout, cin, k, k))
            for i in range(min(cin, cout)):
                w[i, i, k // 2, k // 2] = 1.0
            self.weight = param(w, dtype)
        else:
            gain = np.sqrt(2.0) if init == "he" else 1.0
            self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype, gain)
        self.bias = zeros((cout,), dtype) if bias else None
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, 1, self.padding, bias=self.bias)


class Linear(Module):
    """y = x W^T + b for x of shape (..., fan_in)."""

    def __init__(self, fin: int, fout: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True, init: str = "he"):
        if init == "zero":
            self.weight = zeros((fout, fin), dtype)
        else:
            gain = np.sqrt(2.0) if init == "he" else 1.0
            self.weight = he_normal(rng, (fout, fin), fin, dtype, gain)
        self.bias = zeros((fout,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, x.shape[-1])), T.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return T.reshape(y, lead + (self.weight.shape[0],))


class SGD:
    """Plain SGD with heavy-ball momentum and optional global-norm clipping."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, scale: float = 1.0) -> float:
        grads = [p.grad * scale if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if not np.isfinite(norm):
            raise T.NonFiniteError("non-finite gradient norm")
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += factor * g
            p.data = p.data - self.lr * v
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
