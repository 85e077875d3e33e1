"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to every entry of ``t``."""
    out = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return out


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = DEFAULT_EPS) -> float:
    """Max relative error between backprop and central differences.

    ``fn(*inputs)`` must return a scalar tensor. Inputs should be float64.
    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check needs float64 inputs")
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        n = numeric_grad(lambda: fn(*inputs), t, eps)
        err = np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------- operator suite

def _weighted_sum(out: Tensor, seed: int) -> Tensor:
    # random weights so that normalizing ops (softmax, batch norm) have a nonzero gradient
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(r)).sum()


def _block_case(init, forward, x_shapes, init_args, seed):
    from .params import ParamBuilder

    rng = np.random.default_rng(seed)
    b = ParamBuilder(rng, np.float64)
    init(b, *init_args)
    for t in b.params.values():
        t.data += 0.3 * rng.standard_normal(t.shape)
    scope = b.scope()
    xs = [Tensor(rng.standard_normal(s)) for s in x_shapes]
    params = list(b.params.values())
    n = len(xs)

    def fn(*inputs):
        out = forward(*inputs[:n], scope)
        if isinstance(out, tuple):
            return sum(_weighted_sum(o, seed + k) for k, o in enumerate(out))
        return _weighted_sum(out, seed)

    return fn, xs + params


def _cases():
    from . import blocks, ops
    from .metrics import soft_dice_loss

    def unary(op, shape=(2, 4, 8, 8), scale=1.0):
        def make(seed):
            rng = np.random.default_rng(seed)
            return (lambda x: _weighted_sum(op(x), seed)), [Tensor(scale * rng.standard_normal(shape))]
        return make

    def tensors(seed, *shapes):
        rng = np.random.default_rng(seed)
        return [Tensor(rng.standard_normal(s)) for s in shapes]

    def add(seed):
        return (lambda a, b: _weighted_sum(ops.add(a, b), seed)), tensors(seed, (2, 4, 8, 8), (1, 4, 1, 1))

    def mul(seed):
        return (lambda a, b: _weighted_sum(ops.mul(a, b), seed)), tensors(seed, (2, 4, 8, 8), (2, 4, 1, 1))

    def concat(seed):
        return (lambda a, b: _weighted_sum(ops.concat([a, b], axis=1), seed)), tensors(seed, (2, 2, 8, 8), (2, 3, 8, 8))

    def conv2d(seed):
        return ((lambda x, w, b: _weighted_sum(ops.conv2d(x, w, b), seed)),
                tensors(seed, (2, 4, 8, 8), (3, 4, 3, 3), (3,)))

    def conv2d_1x1(seed):
        return ((lambda x, w, b: _weighted_sum(ops.conv2d(x, w, b), seed)),
                tensors(seed, (2, 4, 8, 8), (3, 4, 1, 1), (3,)))

    def conv_transpose2d(seed):
        return ((lambda x, w, b: _weighted_sum(ops.conv_transpose2d(x, w, b), seed)),
                tensors(seed, (2, 4, 4, 4), (4, 3, 2, 2), (3,)))

    def batch_norm(seed):
        def fn(x, g, b):
            return _weighted_sum(ops.batch_norm(x, g, b, mode="train"), seed)
        return fn, tensors(seed, (2, 4, 8, 8), (4,), (4,))

    def batch_norm_eval(seed):
        rng = np.random.default_rng(seed + 1)
        rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)

        def fn(x, g, b):
            return _weighted_sum(ops.batch_norm(x, g, b, rm, rv, mode="eval"), seed)
        return fn, tensors(seed, (2, 4, 8, 8), (4,), (4,))

    def conv1d_channels(seed):
        return ((lambda d, w, b: _weighted_sum(ops.conv1d_channels(d, w, b), seed)),
                tensors(seed, (2, 6, 1, 1), (3,), (1,)))

    def dice(seed):
        rng = np.random.default_rng(seed)
        target = rng.integers(0, 3, size=(2, 8, 8))
        return (lambda z: soft_dice_loss(ops.softmax(z, axis=1), target)), [Tensor(rng.standard_normal((2, 3, 8, 8)))]

    def mff(seed):
        return _block_case(blocks.init_mff, lambda x, p: blocks.mff_forward(x, p, "train"),
                           [(2, 4, 8, 8)], (4, 8), seed)

    def cca(seed):
        return _block_case(blocks.init_cca, blocks.cca_forward, [(2, 4, 8, 8)], (4,), seed)

    def skip(seed):
        return _block_case(blocks.init_skip, blocks.augmented_skip_forward, [(2, 4, 8, 8)], (4,), seed)

    def encoder(seed):
        return _block_case(blocks.init_encoder, lambda x, p: blocks.encoder_forward(x, p, "train"),
                           [(2, 2, 8, 8)], (2, 4), seed)

    def decoder(seed):
        return _block_case(blocks.init_decoder, lambda x, s, p: blocks.decoder_forward(x, s, p, "train"),
                           [(2, 8, 4, 4), (2, 4, 8, 8)], (8, 4), seed)

    def bridge(seed):
        return _block_case(blocks.init_bridge, lambda x, p: blocks.bridge_forward(x, p, "train"),
                           [(2, 4, 4, 4)], (4, 8), seed)

    def head(seed):
        return _block_case(blocks.init_head, blocks.head_forward, [(2, 4, 8, 8)], (4, 3), seed)

    return {
        "add": add,
        "mul": mul,
        "concat": concat,
        "relu": unary(ops.relu),
        "sigmoid": unary(ops.sigmoid, scale=3.0),
        "softmax": unary(lambda x: ops.softmax(x, axis=1), scale=3.0),
        "conv2d": conv2d,
        "conv2d_1x1": conv2d_1x1,
        "conv_transpose2d": conv_transpose2d,
        "max_pool2d": unary(ops.max_pool2d),
        "global_avg_pool": unary(ops.global_avg_pool),
        "batch_norm": batch_norm,
        "batch_norm_eval": batch_norm_eval,
        "conv1d_channels": conv1d_channels,
        "soft_dice_loss": dice,
        "mff": mff,
        "cca": cca,
        "augmented_skip": skip,
        "encoder": encoder,
        "decoder": decoder,
        "bridge": bridge,
        "head": head,
    }


CHECK_NAMES = tuple(_cases())


def run_suite(names=None, seed: int = 0, eps: float = DEFAULT_EPS):
    """Run :func:`grad_check` for each named case; returns ``[(name, max_rel_error)]``."""
    cases = _cases()
    names = list(cases) if names is None else list(names)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise KeyError(f"unknown gradient checks {unknown}; choose from {sorted(cases)}")
    results = []
    for name in names:
        fn, inputs = cases[name](seed)
        results.append((name, grad_check(fn, inputs, eps)))
    return results
