"""Composite building blocks of the MFF-CCA U-Net.

Each block comes as an ``init_*`` function that registers its parameters on a
:class:`~mffunet.params.ParamBuilder` and a ``*_forward`` function that reads
them back through a :class:`~mffunet.params.Scope`. Forward functions are pure
apart from the running batch-norm statistics updated in ``"train"`` mode.
"""
from __future__ import annotations

from typing import Tuple

from . import ops
from .params import ParamBuilder, Scope
from .tensor import Tensor


def mff_split(c_out: int) -> Tuple[int, int, int]:
    """Output widths of the three MFF conv blocks; they sum to ``c_out``."""
    if c_out < 4 or c_out % 4:
        raise ValueError(f"MFF width must be a positive multiple of 4, got {c_out}")
    return c_out // 2, c_out // 4, c_out // 4


def _bn(x: Tensor, p: Scope, name: str, mode: str) -> Tensor:
    return ops.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"],
                          p.buffer(f"{name}.running_mean"), p.buffer(f"{name}.running_var"), mode=mode)


def _conv(x: Tensor, p: Scope, name: str) -> Tensor:
    b = p[f"{name}.b"] if f"{name}.b" in p else None
    return ops.conv2d(x, p[f"{name}.w"], b)


def _conv_bn_relu(x: Tensor, p: Scope, conv: str, bn: str, mode: str) -> Tensor:
    return ops.relu(_bn(_conv(x, p, conv), p, bn, mode))


# ---------------------------------------------------------------- MFF

def init_mff(b: ParamBuilder, c_in: int, c_out: int) -> None:
    widths = mff_split(c_out)
    prev = c_in
    for i, w in enumerate(widths, start=1):
        blk = b.sub(f"block{i}")
        blk.conv("conv", w, prev, 3)
        blk.batch_norm("bn", w)
        if prev != w:
            blk.conv("proj", w, prev, 1, bias=False)
        prev = w
    b.batch_norm("fuse_bn", c_out)
    b.conv("path1x1", c_out, c_in, 1)


def mff_forward(x: Tensor, p: Scope, mode: str = "train") -> Tensor:
    """Multi-layer feature fusion.

    Three sequential residual conv blocks (conv3x3, batch norm, add the block
    input, ReLU) whose outputs are concatenated, batch-normalized, summed
    with a parallel 1x1 projection of ``x`` and passed through ReLU.
    """
    stages = []
    h = x
    for i in (1, 2, 3):
        blk = p.sub(f"block{i}")
        y = _bn(_conv(h, blk, "conv"), blk, "bn", mode)
        shortcut = ops.conv2d(h, blk["proj.w"]) if "proj.w" in blk else h
        h = ops.relu(y + shortcut)
        stages.append(h)
    fused = _bn(ops.concat(stages, axis=1), p, "fuse_bn", mode)
    side = _conv(x, p, "path1x1")
    if fused.shape != side.shape:
        raise ValueError(f"MFF path mismatch: concat {fused.shape} vs 1x1 path {side.shape}")
    return ops.relu(fused + side)


# ---------------------------------------------------------------- CCA

def init_cca(b: ParamBuilder, c: int) -> None:
    b.constant("w", (c,), 1.0)
    b.he_normal("kernel", (3,), 3)
    b.constant("bias", (1,), 0.0)


def cca_descriptor(x: Tensor, p: Scope) -> Tensor:
    """Weighted global descriptor ``W * GAP(x)``, shape N x C x 1 x 1."""
    c = x.shape[1]
    if p["w"].shape != (c,):
        raise ValueError(f"CCA expects {p['w'].shape[0]} channels, got {c}")
    return ops.global_avg_pool(x) * ops.reshape(p["w"], (1, c, 1, 1))


def cca_attention(x: Tensor, p: Scope) -> Tensor:
    """Per-channel attention factors in (0, 1), shape N x C x 1 x 1."""
    return ops.sigmoid(ops.conv1d_channels(cca_descriptor(x, p), p["kernel"], p["bias"]))


def cca_forward(x: Tensor, p: Scope) -> Tensor:
    return x * cca_attention(x, p)


# ---------------------------------------------------------------- skip

def init_skip(b: ParamBuilder, c: int) -> None:
    b.conv("conv3", c, c, 3)
    b.conv("conv1", c, c, 1)


def augmented_skip_forward(s: Tensor, p: Scope) -> Tensor:
    """ReLU of parallel 3x3 and 1x1 convolutions summed."""
    if p["conv3.w"].shape[1] != s.shape[1]:
        raise ValueError(f"skip expects {p['conv3.w'].shape[1]} channels, got {s.shape[1]}")
    return ops.relu(_conv(s, p, "conv3") + _conv(s, p, "conv1"))


# ---------------------------------------------------------------- encoder / decoder

def init_encoder(b: ParamBuilder, c_in: int, c_out: int) -> None:
    init_mff(b.sub("mff"), c_in, c_out)
    init_cca(b.sub("cca"), c_out)
    init_skip(b.sub("skip"), c_out)


def encoder_forward(x: Tensor, p: Scope, mode: str = "train") -> Tuple[Tensor, Tensor]:
    """Returns ``(pooled, skip)``; both are taken from the attended features."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"encoder needs even spatial extents, got {x.shape[2:]}")
    f = cca_forward(mff_forward(x, p.sub("mff"), mode), p.sub("cca"))
    return ops.max_pool2d(f), augmented_skip_forward(f, p.sub("skip"))


def init_decoder(b: ParamBuilder, c_in: int, c_out: int) -> None:
    b.conv_transpose("up", c_in, c_out)
    b.conv("conv1", c_out, 2 * c_out, 3)
    b.batch_norm("bn1", c_out)
    b.conv("conv2", c_out, c_out, 3)
    b.batch_norm("bn2", c_out)


def decoder_forward(x: Tensor, skip: Tensor, p: Scope, mode: str = "train") -> Tensor:
    c_out = p["up.w"].shape[1]
    n, _, h, w = x.shape
    if skip.shape != (n, c_out, 2 * h, 2 * w):
        raise ValueError(f"skip shape {skip.shape} does not match expected {(n, c_out, 2 * h, 2 * w)}")
    u = ops.conv_transpose2d(x, p["up.w"], p["up.b"])
    h = ops.concat([u, skip], axis=1)
    h = _conv_bn_relu(h, p, "conv1", "bn1", mode)
    return _conv_bn_relu(h, p, "conv2", "bn2", mode)


def init_bridge(b: ParamBuilder, c_in: int, c_out: int) -> None:
    b.conv("conv1", c_out, c_in, 3)
    b.batch_norm("bn1", c_out)
    b.conv("conv2", c_out, c_out, 3)
    b.batch_norm("bn2", c_out)


def bridge_forward(x: Tensor, p: Scope, mode: str = "train") -> Tensor:
    h = _conv_bn_relu(x, p, "conv1", "bn1", mode)
    return _conv_bn_relu(h, p, "conv2", "bn2", mode)


def init_head(b: ParamBuilder, c_in: int, num_classes: int) -> None:
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    b.conv("conv", num_classes, c_in, 1)


def head_forward(x: Tensor, p: Scope) -> Tensor:
    """1x1 convolution to class logits followed by a softmax over channels."""
    return ops.softmax(_conv(x, p, "conv"), axis=1)
