"""Attention branch: per-class sigmoid maps gating the backbone features."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Conv2d, Module
from .tensor import EPS_DIV


@dataclass
class AttentionConfig:
    channels: int = 20
    hidden_channels: list = field(default_factory=list)
    epsilon: float = EPS_DIV
    inverted: bool = False

    def __post_init__(self):
        if not self.hidden_channels:
            self.hidden_channels = [self.channels, self.channels]
        self.hidden_channels = list(self.hidden_channels)
        if len(self.hidden_channels) != 2:
            raise ConfigError("hidden_channels must list exactly two widths")
        if self.epsilon <= 0:
            raise ConfigError("attention epsilon must be positive")


class NetA(Module):
    """Three 1×1 convolutions, ReLU between them, sigmoid at the end."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        c = config.channels
        h1, h2 = config.hidden_channels
        self.conv1 = self.add_child("conv1", Conv2d(rng, c, h1, 1))
        self.conv2 = self.add_child("conv2", Conv2d(rng, h1, h2, 1))
        self.conv3 = self.add_child("conv3", Conv2d(rng, h2, c, 1))

    def __call__(self, features):
        if features.ndim != 4 or features.shape[1] != self.config.channels:
            raise ShapeError("net_a", features.shape,
                             detail=f"expected {self.config.channels} channels")
        x = T.relu(self.conv1(features))
        x = T.relu(self.conv2(x))
        return T.sigmoid(self.conv3(x))


def net_a_forward(features, net):
    return net(features)


def attention_output(attn, features, inverted=False, eps=EPS_DIV):
    """Per-channel ``GAP(A) / GAP(A * F)``; ``inverted`` gives ``GAP(A * F) / GAP(A)``."""
    if attn.shape != features.shape:
        raise ShapeError("attention_output", attn.shape, features.shape)
    pooled_attn = T.global_avg_pool(attn)
    pooled_masked = T.global_avg_pool(attn * features)
    if inverted:
        return T.div(pooled_masked, pooled_attn, eps)
    return T.div(pooled_attn, pooled_masked, eps)
