"""Minimal parameter containers: a Module base and the two generic layers."""
from __future__ import annotations

import numpy as np

from .ops import layer_norm, linear
from .rng import RngStream
from .tensor import Tensor, parameter


class Module:
    """Attribute-scanning parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; submodules
    may be attributes or lists of modules.  Names are dotted paths in
    attribute-definition order.
    """

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None


def param_count(obj) -> int:
    """Total number of scalar parameters in a Module or a name->tensor mapping."""
    if isinstance(obj, Module):
        items = obj.parameters().values()
    elif isinstance(obj, dict):
        items = obj.values()
    else:
        items = obj
    return int(sum(np.asarray(getattr(p, "data", p)).size for p in items))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True, dtype=np.float64):
        self.weight = parameter(rng.truncated_normal((d_in, d_out), dtype=dtype))
        if bias:
            self.bias = parameter(np.zeros(d_out, dtype=dtype))
        else:
            self.bias = None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float64):
        self.gain = parameter(np.ones(d, dtype=dtype))
        self.bias = parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)
