"""Parameter containers and initializers shared by the model modules."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Normal with variance 2/fan_in; keeps activation scale through ReLU stacks."""
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def conv_weight(rng: np.random.Generator, k: int, cin: int, cout: int, init: str = "xavier") -> Tensor:
    if init == "he":
        return he(rng, (k, k, cin, cout), k * k * cin)
    return xavier(rng, (k, k, cin, cout), k * k * cin, k * k * cout)


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, width: int) -> "NormParams":
        return cls(ones(width), zeros(width))


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor | None

    @classmethod
    def init(cls, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True) -> "LinearParams":
        return cls(xavier(rng, (fan_in, fan_out), fan_in, fan_out), zeros(fan_out) if bias else None)


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor | None
    stride: int = 1
    padding: int = 0

    @classmethod
    def init(
        cls, rng, k: int, cin: int, cout: int, stride: int = 1, padding: int = 0, bias: bool = True, init: str = "xavier"
    ) -> "ConvParams":
        return cls(conv_weight(rng, k, cin, cout, init), zeros(cout) if bias else None, stride, padding)


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested dataclasses / lists / dicts of Tensors into dotted names, in field order."""
    out: dict[str, Tensor] = {}

    def walk(node, name):
        if isinstance(node, Tensor):
            out[name] = node
        elif dataclasses.is_dataclass(node) and not isinstance(node, type):
            for f in dataclasses.fields(node):
                walk(getattr(node, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{name}.{i}" if name else str(i))
        elif isinstance(node, dict):
            for k, item in node.items():
                walk(item, f"{name}.{k}" if name else str(k))

    walk(obj, prefix)
    return out


def parameter_count(obj) -> int:
    return int(sum(t.size for t in named_parameters(obj).values()))
