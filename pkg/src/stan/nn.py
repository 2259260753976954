"""Small building blocks shared by the network modules.

Parameters are plain Tensors with requires_grad=True, discovered by
walking module attributes; there is no registration machinery beyond
that.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, layernorm, linear


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Base class providing named parameter traversal and state loading."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = prefix + key
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_params(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(
                f"checkpoint does not match model: missing={sorted(missing)[:5]} "
                f"extra={sorted(extra)[:5]}"
            )
        for name, p in params.items():
            arr = state[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ConfigError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = np.asarray(arr, dtype=p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.numpy() for name, p in self.named_params().items()}


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = uniform_fan_in(rng, (d_out, d_in), d_in)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gamma, self.beta, self.eps)
