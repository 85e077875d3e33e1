"""Assembly of the full MFF-CCA U-Net."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import blocks
from .params import ParamBuilder, Scope
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 32
    depth: int = 4
    num_classes: int = 3
    input_size: int = 256
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.depth != 4:
            raise ConfigError(f"depth is fixed at 4, got {self.depth}")
        if self.base_width < 4 or self.base_width % 4:
            raise ConfigError(f"base_width must be a positive multiple of 4, got {self.base_width}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        s = self.input_size
        if s < 2 ** self.depth or s & (s - 1):
            raise ConfigError(f"input_size must be a power of two >= {2 ** self.depth}, got {s}")

    @property
    def encoder_widths(self) -> List[int]:
        return [self.base_width * 2 ** i for i in range(self.depth)]

    @property
    def bridge_width(self) -> int:
        return self.base_width * 2 ** self.depth

    @property
    def decoder_widths(self) -> List[int]:
        return self.encoder_widths[::-1]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            fields = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"bad config text: {e}") from None
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(fields) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**fields)


class Model:
    """Parameters, running statistics and forward pass of the segmentation network."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    @property
    def scope(self) -> Scope:
        return Scope(self.params, self.buffers)

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def param_count(self) -> int:
        return param_count(self)

    def forward(self, x, mode: str = "eval", trace: Optional[dict] = None) -> Tensor:
        return model_forward(self, x, mode, trace)

    __call__ = forward


def build_model(config: ModelConfig = ModelConfig(), dtype=np.float32) -> Model:
    b = ParamBuilder(np.random.default_rng(config.seed), dtype)
    prev = config.in_channels
    for i, w in enumerate(config.encoder_widths):
        blocks.init_encoder(b.sub(f"enc{i}"), prev, w)
        prev = w
    blocks.init_bridge(b.sub("bridge"), prev, config.bridge_width)
    prev = config.bridge_width
    for i, w in enumerate(config.decoder_widths):
        blocks.init_decoder(b.sub(f"dec{i}"), prev, w)
        prev = w
    blocks.init_head(b.sub("head"), prev, config.num_classes)
    return Model(config, b.params, b.buffers)


def model_forward(m: Model, x, mode: str = "eval", trace: Optional[dict] = None) -> Tensor:
    """Per-pixel class probabilities, N x K x H x W.

    If ``trace`` is a dict it is filled with the shapes of intermediate
    outputs (``enc0.pooled``, ``enc0.skip``, ..., ``bridge``, ``dec0``, ...).
    """
    cfg = m.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=next(iter(m.params.values())).dtype))
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"input shape {x.shape} does not match config (N, {expected[0]}, {expected[1]}, {expected[2]})")
    p = m.scope
    skips = []
    h = x
    for i in range(cfg.depth):
        h, s = blocks.encoder_forward(h, p.sub(f"enc{i}"), mode)
        skips.append(s)
        if trace is not None:
            trace[f"enc{i}.pooled"] = h.shape
            trace[f"enc{i}.skip"] = s.shape
    h = blocks.bridge_forward(h, p.sub("bridge"), mode)
    if trace is not None:
        trace["bridge"] = h.shape
    for i, s in enumerate(reversed(skips)):
        h = blocks.decoder_forward(h, s, p.sub(f"dec{i}"), mode)
        if trace is not None:
            trace[f"dec{i}"] = h.shape
    out = blocks.head_forward(h, p.sub("head"))
    if trace is not None:
        trace["head"] = out.shape
    return out


def param_count(m: Model) -> int:
    return int(sum(t.size for t in m.params.values()))
