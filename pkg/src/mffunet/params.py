"""Named parameter storage and deterministic initialization."""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .tensor import Tensor


class ParamBuilder:
    """Creates named parameters and buffers under a dotted prefix.

    Conv weights get He-normal init (std ``sqrt(2 / fan_in)``), biases zero,
    batch-norm gamma one and beta zero, running mean zero and variance one.
    Creation order is fixed by the calling code, so a seed fully determines
    every value.
    """

    def __init__(self, rng: np.random.Generator, dtype=np.float32,
                 params: Optional[Dict[str, Tensor]] = None,
                 buffers: Optional[Dict[str, np.ndarray]] = None, prefix: str = ""):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params = {} if params is None else params
        self.buffers = {} if buffers is None else buffers
        self.prefix = prefix

    def sub(self, name: str) -> "ParamBuilder":
        return ParamBuilder(self.rng, self.dtype, self.params, self.buffers, f"{self.prefix}{name}.")

    def scope(self) -> "Scope":
        return Scope(self.params, self.buffers, self.prefix)

    def _add(self, name: str, value: np.ndarray) -> None:
        key = self.prefix + name
        if key in self.params:
            raise KeyError(f"duplicate parameter {key}")
        self.params[key] = Tensor(value.astype(self.dtype), requires_grad=True)

    def he_normal(self, name: str, shape: tuple, fan_in: int) -> None:
        self._add(name, self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in))

    def constant(self, name: str, shape: tuple, value: float) -> None:
        self._add(name, np.full(shape, value))

    def conv(self, name: str, c_out: int, c_in: int, k: int, bias: bool = True) -> None:
        self.he_normal(f"{name}.w", (c_out, c_in, k, k), c_in * k * k)
        if bias:
            self.constant(f"{name}.b", (c_out,), 0.0)

    def conv_transpose(self, name: str, c_in: int, c_out: int) -> None:
        self.he_normal(f"{name}.w", (c_in, c_out, 2, 2), c_in * 4)
        self.constant(f"{name}.b", (c_out,), 0.0)

    def batch_norm(self, name: str, c: int) -> None:
        self.constant(f"{name}.gamma", (c,), 1.0)
        self.constant(f"{name}.beta", (c,), 0.0)
        self.buffers[f"{self.prefix}{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{self.prefix}{name}.running_var"] = np.ones(c, dtype=self.dtype)


class Scope:
    """Read access to parameters and buffers relative to a dotted prefix."""

    def __init__(self, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray], prefix: str = ""):
        self.params = params
        self.buffers = buffers
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.params[self.prefix + name]

    def __contains__(self, name: str) -> bool:
        return self.prefix + name in self.params

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[self.prefix + name]

    def sub(self, name: str) -> "Scope":
        return Scope(self.params, self.buffers, f"{self.prefix}{name}.")

    def names(self) -> list:
        return [k[len(self.prefix):] for k in self.params if k.startswith(self.prefix)]
