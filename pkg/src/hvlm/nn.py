"""Tiny layer system: parameter registration, Linear, LayerNorm."""

from __future__ import annotations

import numpy as np

from .errors import StateError
from .tensor import Parameter, Tensor, add, div, expand, matmul, mean, mul, reshape, sqrt, sub


class Layer:
    """Base class tracking Parameter/Layer attributes for tree walks."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Layer):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Layer) for v in value):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for k, p in self._params.items():
            yield (f"{prefix}{k}", p)
        for k, child in self._children.items():
            if isinstance(child, (list, tuple)):
                for i, c in enumerate(child):
                    yield from c.named_parameters(f"{prefix}{k}.{i}.")
            else:
                yield from child.named_parameters(f"{prefix}{k}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p


def bind_parameter_names(root: Layer, prefix: str = ""):
    """Assign dotted-path names to every parameter; names must be unique."""
    seen = set()
    for name, p in root.named_parameters(prefix):
        if name in seen:
            raise StateError(f"duplicate parameter name {name!r}")
        seen.add(name)
        p.name = name
    return root


def zero_all(layer: Layer):
    """Zero every parameter (used to exercise residual-identity contracts)."""
    for p in layer.parameters():
        p.data[...] = 0.0
    return layer


def load_state(root: Layer, state: dict, prefix: str = ""):
    """Copy checkpoint arrays into parameters by bound name (strict)."""
    for name, p in root.named_parameters(prefix):
        if name not in state:
            raise StateError(f"checkpoint missing parameter {name!r}")
        arr = state[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise StateError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
        p.data[...] = arr


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float = 1.0):
        super().__init__()
        self.weight = Parameter(
            rng.standard_normal((d_in, d_out)) * (scale / np.sqrt(d_in)), "weight"
        )
        self.bias = Parameter(np.zeros(d_out), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = add(out, expand(reshape(self.bias, (1, -1)), out.data.shape))
        return out


class LayerNorm(Layer):
    """Normalization over the last axis with learned scale/shift."""

    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = Parameter(np.ones(d), "gamma")
        self.beta = Parameter(np.zeros(d), "beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = mean(x, axis=-1, keepdims=True)
        xc = sub(x, expand(mu, x.data.shape))
        var = mean(mul(xc, xc), axis=-1, keepdims=True)
        xn = div(xc, expand(sqrt(add(var, self.eps)), x.data.shape))
        g = expand(reshape(self.gamma, (1,) * (x.data.ndim - 1) + (-1,)), x.data.shape)
        b = expand(reshape(self.beta, (1,) * (x.data.ndim - 1) + (-1,)), x.data.shape)
        return add(mul(xn, g), b)
