"""Differentiable operators on :class:`~mffunet.tensor.Tensor`.

Image tensors use the N x C x H x W layout. Convolutions are
cross-correlations (no kernel flip).
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, Tensor, get_default_dtype

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(value, dtype=dtype))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        da = unbroadcast(grad * self.b, self.a.shape) if self.needs_grad[0] else None
        db = unbroadcast(grad * self.a, self.b.shape) if self.needs_grad[1] else None
        return da, db


class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        da = unbroadcast(grad / self.b, self.a.shape) if self.needs_grad[0] else None
        db = unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape) if self.needs_grad[1] else None
        return da, db


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    return Add.apply(a, _as_tensor(b, a))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    return Sub.apply(a, _as_tensor(b, a))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    return Mul.apply(a, _as_tensor(b, a))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    return Div.apply(a, _as_tensor(b, a))


# ---------------------------------------------------------------- reductions / shape

class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    axis %= ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"cannot concat shapes {ref} and {t.shape} on axis {axis}")
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------- activations

class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        e = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        self.y = y
        return y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        self.y = z / z.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    return Softmax.apply(x, axis=axis % x.ndim)


# ---------------------------------------------------------------- convolutions

class Conv2d(Function):
    def forward(self, x, w, b, stride, padding):
        n, c, h, wd = x.shape
        co, ci, kh, kw = w.shape
        self.x_shape = x.shape
        self.stride, self.padding = stride, padding
        self.w = w
        self.fast = kh == kw == 1 and stride == 1 and padding == 0
        if self.fast:
            # 1x1 fast path: a per-pixel matmul over channels
            self.x = x if self.needs_grad[1] else None
            out = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x, optimize=True)
            return out + b.reshape(1, co, 1, 1)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)
        self.cols = cols if self.needs_grad[1] else None
        self.out_hw = (ho, wo)
        out = cols @ w.reshape(co, -1).T
        out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out) + b.reshape(1, co, 1, 1)

    def backward(self, grad):
        w = self.w
        co, ci, kh, kw = w.shape
        db = grad.sum(axis=(0, 2, 3)) if self.needs_grad[2] else None
        if self.fast:
            dx = np.einsum("oc,nohw->nchw", w[:, :, 0, 0], grad, optimize=True) if self.needs_grad[0] else None
            dw = (np.einsum("nohw,nchw->oc", grad, self.x, optimize=True).reshape(w.shape)
                  if self.needs_grad[1] else None)
            return dx, dw, db
        n, c, h, wd = self.x_shape
        ho, wo = self.out_hw
        gm = grad.transpose(0, 2, 3, 1).reshape(-1, co)
        dw = (gm.T @ self.cols).reshape(w.shape) if self.needs_grad[1] else None
        dx = None
        if self.needs_grad[0]:
            s, p = self.stride, self.padding
            dcols = (gm @ w.reshape(co, -1)).reshape(n, ho, wo, ci, kh, kw)
            dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return dx, dw, db


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: Optional[int] = None) -> Tensor:
    """2-D cross-correlation. ``padding=None`` means "same" padding ``(k - 1) // 2``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weights, got {x.shape} and {w.shape}")
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weights expect {ci}")
    if padding is None:
        padding = (kh - 1) // 2
    for extent, k in ((x.shape[2], kh), (x.shape[3], kw)):
        span = extent + 2 * padding - k
        if span < 0 or span % stride:
            raise ValueError(
                f"non-integral output extent: ({extent} + 2*{padding} - {k}) / {stride} + 1"
            )
    if b is None:
        b = Tensor(np.zeros(co, dtype=x.dtype))
    if b.shape != (co,):
        raise ValueError(f"bias shape {b.shape} does not match {co} output channels")
    return Conv2d.apply(x, w, b, stride=stride, padding=padding)


class ConvTranspose2d(Function):
    def forward(self, x, w, b):
        n, ci, h, wd = x.shape
        co = w.shape[1]
        self.x, self.w = x, w
        # every input pixel scatters value * kernel into its own 2x2 tile
        y = np.einsum("nchw,coab->nohawb", x, w, optimize=True).reshape(n, co, 2 * h, 2 * wd)
        return y + b.reshape(1, co, 1, 1)

    def backward(self, grad):
        n, co, h2, w2 = grad.shape
        g = grad.reshape(n, co, h2 // 2, 2, w2 // 2, 2)
        dx = np.einsum("nohawb,coab->nchw", g, self.w, optimize=True) if self.needs_grad[0] else None
        dw = np.einsum("nchw,nohawb->coab", self.x, g, optimize=True) if self.needs_grad[1] else None
        db = grad.sum(axis=(0, 2, 3)) if self.needs_grad[2] else None
        return dx, dw, db


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-2, 2x2 transposed convolution; ``w`` is C_in x C_out x 2 x 2."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (2, 2):
        raise ValueError(f"conv_transpose2d expects N x C x H x W input and C_in x C_out x 2 x 2 weights, "
                         f"got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weights expect {w.shape[0]}")
    if b is None:
        b = Tensor(np.zeros(w.shape[1], dtype=x.dtype))
    return ConvTranspose2d.apply(x, w, b)


class Conv1dChannels(Function):
    def forward(self, desc, w, b):
        d = desc[:, :, 0, 0]
        self.dp = np.pad(d, ((0, 0), (1, 1)))
        self.w = w
        c = d.shape[1]
        out = w[0] * self.dp[:, 0:c] + w[1] * self.dp[:, 1:c + 1] + w[2] * self.dp[:, 2:c + 2] + b[0]
        return out[:, :, None, None]

    def backward(self, grad):
        g = grad[:, :, 0, 0]
        c = g.shape[1]
        dw = np.array([(g * self.dp[:, j:j + c]).sum() for j in range(3)], dtype=g.dtype)
        db = np.array([g.sum()], dtype=g.dtype)
        ddp = np.zeros_like(self.dp)
        for j in range(3):
            ddp[:, j:j + c] += self.w[j] * g
        return ddp[:, 1:-1, None, None], dw, db


def conv1d_channels(desc: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Length-3 cross-correlation along the channel axis of an N x C x 1 x 1 descriptor."""
    if desc.ndim != 4 or desc.shape[2:] != (1, 1):
        raise ValueError(f"expected N x C x 1 x 1 descriptor, got {desc.shape}")
    if w.shape != (3,) or b.shape != (1,):
        raise ValueError(f"expected kernel of shape (3,) and bias (1,), got {w.shape} and {b.shape}")
    return Conv1dChannels.apply(desc, w, b)


# ---------------------------------------------------------------- pooling

class MaxPool2d(Function):
    def forward(self, x):
        n, c, h, w = x.shape
        tiles = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        # argmax returns the first maximum, i.e. the first in row-major scan order
        self.idx = tiles.argmax(axis=-1)
        self.x_shape = x.shape
        return np.take_along_axis(tiles, self.idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.x_shape
        tiles = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(tiles, self.idx[..., None], grad[..., None], axis=-1)
        dx = tiles.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects N x C x H x W, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max_pool2d needs even spatial extents, got {x.shape[2:]}")
    return MaxPool2d.apply(x)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.x_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad):
        h, w = self.x_shape[2:]
        return (np.broadcast_to(grad / (h * w), self.x_shape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects N x C x H x W, got {x.shape}")
    return GlobalAvgPool.apply(x)


# ---------------------------------------------------------------- normalization

class BatchNorm(Function):
    def forward(self, x, gamma, beta, running_mean, running_var, training, momentum, eps):
        shape = (1, -1, 1, 1)
        if training:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if running_mean is not None:
                running_mean *= 1.0 - momentum
                running_mean += momentum * mu
                running_var *= 1.0 - momentum
                running_var += momentum * var
        else:
            mu, var = running_mean, running_var
        self.training = training
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(shape)
        self.xhat = (x - mu.reshape(shape).astype(x.dtype)) * self.inv_std
        self.gamma = gamma.reshape(shape)
        return self.gamma * self.xhat + beta.reshape(shape)

    def backward(self, grad):
        xhat = self.xhat
        dgamma = (grad * xhat).sum(axis=(0, 2, 3)) if self.needs_grad[1] else None
        dbeta = grad.sum(axis=(0, 2, 3)) if self.needs_grad[2] else None
        dx = None
        if self.needs_grad[0]:
            dxhat = grad * self.gamma
            if self.training:
                m = grad.shape[0] * grad.shape[2] * grad.shape[3]
                dx = self.inv_std / m * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            else:
                dx = dxhat * self.inv_std
        return dx, dgamma, dbeta


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Optional[np.ndarray] = None,
               running_var: Optional[np.ndarray] = None, mode: str = "train",
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization.

    In ``"train"`` mode the batch statistics normalize the input and the
    running arrays (if given) are updated in place as
    ``new = (1 - momentum) * old + momentum * batch``. ``"eval"`` mode reads
    the running statistics instead.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ValueError(f"batch_norm expects N x C x H x W, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if mode == "eval" and (running_mean is None or running_var is None):
        raise ValueError("eval mode needs running statistics")
    return BatchNorm.apply(x, gamma, beta, running_mean=running_mean, running_var=running_var,
                           training=mode == "train", momentum=momentum, eps=eps)
