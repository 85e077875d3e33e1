"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations that involve at least one
tensor with ``requires_grad=True`` record a node (the producing
:class:`Function` plus its inputs) on the output, so the recorded graph can be
walked backwards from a scalar loss.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Iterator, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating point precision."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Node:
    """One recorded operation: the function object and the tensors it consumed."""

    __slots__ = ("fn", "inputs")

    def __init__(self, fn: "Function", inputs: tuple):
        self.fn = fn
        self.inputs = inputs


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype() if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar; the heavy lifting is in mffunet.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(_wrap(other, self.dtype), self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def _wrap(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or get_default_dtype()))


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays (saving whatever the
    backward pass needs on ``self``) and ``backward``, which maps the upstream
    gradient to one gradient per input (``None`` for inputs that need none).
    """

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(_wrap(t) for t in inputs)
        fn = cls()
        enabled = is_grad_enabled()
        fn.needs_grad = tuple(enabled and t.requires_grad for t in tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        if any(fn.needs_grad):
            out.requires_grad = True
            out._node = Node(fn, tensors)
        return out


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` into every reachable leaf's ``.grad``.

    Leaf gradients accumulate across calls; callers zero them between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise ValueError("backward called on a tensor that was not produced by a recorded operation")

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t._node.fn.backward(g)
        for parent, pg in zip(t._node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"{type(t._node.fn).__name__}.backward returned shape {pg.shape} "
                    f"for input of shape {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def tensor_create(shape, fill=0.0, *, seed: Optional[int] = None, distribution: str = "normal",
                  scale: float = 1.0, dtype=None, requires_grad: bool = False) -> Tensor:
    """Create a tensor of ``shape``.

    ``fill`` is either a constant, an explicit sequence of values (row-major),
    or the string ``"random"`` together with ``seed`` and ``distribution``
    (``"normal"`` or ``"uniform"`` on [-1, 1), multiplied by ``scale``).
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"all extents must be >= 1, got {shape}")
    dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
    n = int(np.prod(shape))
    if isinstance(fill, str):
        if fill != "random":
            raise ValueError(f"unknown fill {fill!r}")
        rng = np.random.default_rng(seed)
        if distribution == "normal":
            values = rng.standard_normal(n)
        elif distribution == "uniform":
            values = rng.uniform(-1.0, 1.0, n)
        else:
            raise ValueError(f"unknown distribution {distribution!r}")
        data = (values * scale).astype(dtype).reshape(shape)
    elif np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype)
    else:
        values = np.asarray(fill, dtype=dtype).ravel()
        if values.size != n:
            raise ValueError(f"{values.size} values given for shape {shape} ({n} elements)")
        data = values.reshape(shape)
    return Tensor(data, requires_grad=requires_grad)
