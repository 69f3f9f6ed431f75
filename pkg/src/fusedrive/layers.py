"""Parameter containers and the small layers everything else is built from."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data, name: str = "") -> Tensor:
    return Tensor(np.asarray(data, dtype=T.default_dtype()), requires_grad=True, name=name)


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.standard_normal(shape) * std)


@dataclass
class Linear:
    w: Tensor
    b: Tensor | None

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, std: float | None = None,
                zero: bool = False, bias: bool = True) -> Linear:
    if zero:
        w = param(np.zeros((d_in, d_out)))
    else:
        w = normal(rng, (d_in, d_out), std if std is not None else d_in ** -0.5)
    return Linear(w, param(np.zeros(d_out)) if bias else None)


def linear(x: Tensor, lin: Linear) -> Tensor:
    y = T.matmul(x, lin.w)
    return y if lin.b is None else T.add(y, lin.b)


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor


def init_layer_norm(d: int) -> LayerNorm:
    return LayerNorm(param(np.ones(d)), param(np.zeros(d)))


def layer_norm(x: Tensor, ln: LayerNorm) -> Tensor:
    return T.layer_norm(x, ln.gamma, ln.beta)


def named_parameters(obj, prefix: str = "") -> list:
    """Flatten nested dataclasses/lists of tensors into ordered ``(name, tensor)`` pairs."""
    out = []
    if isinstance(obj, Tensor):
        out.append((prefix, obj))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.extend(named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.extend(named_parameters(item, f"{prefix}.{i}" if prefix else str(i)))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            out.extend(named_parameters(item, f"{prefix}.{k}" if prefix else str(k)))
    return out
