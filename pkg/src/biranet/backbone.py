"""Residual convolutional feature extractor.

Produces the feature block consumed by the attention and bilinear paths:
``out_channels`` maps (a fixed number per class) on an ``out_spatial`` grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .errors import ConfigError, GeometryError, ShapeError
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import conv_output_size


@dataclass
class BackboneConfig:
    input_channels: int = 3
    stage_widths: list = field(default_factory=lambda: [16, 32])
    blocks_per_stage: list = field(default_factory=lambda: [1, 1])
    stage_strides: list = field(default_factory=lambda: [2, 2])
    stem_stride: int = 2
    out_channels: int = 20
    out_spatial: tuple = (8, 8)
    num_classes: int = 5
    use_batchnorm: bool = True

    def __post_init__(self):
        self.stage_widths = list(self.stage_widths)
        self.blocks_per_stage = list(self.blocks_per_stage)
        self.stage_strides = list(self.stage_strides)
        self.out_spatial = tuple(self.out_spatial)
        self.validate()

    def validate(self):
        if not self.stage_widths or len(self.stage_widths) != len(self.blocks_per_stage):
            raise ConfigError("stage_widths and blocks_per_stage need equal length >= 1")
        if len(self.stage_strides) != len(self.stage_widths):
            raise ConfigError("stage_strides must have one entry per stage")
        if any(b < 1 for b in self.blocks_per_stage) or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage widths and block counts must be positive")
        if self.out_channels % self.num_classes:
            raise ConfigError(
                f"out_channels={self.out_channels} not divisible by num_classes={self.num_classes}")

    @property
    def maps_per_class(self):
        return self.out_channels // self.num_classes

    def shape_trace(self, height, width):
        """Stage-by-stage (name, C, H, W) list; H/W are None once geometry breaks."""
        trace = [("input", self.input_channels, height, width)]

        def step(name, ch, h, w, stride):
            h2 = None if h is None else conv_output_size(h, 3, stride, 1, floor_mode=True)
            w2 = None if w is None else conv_output_size(w, 3, stride, 1, floor_mode=True)
            trace.append((name, ch, h2, w2))
            return h2, w2

        h, w = step("stem", self.stage_widths[0], height, width, self.stem_stride)
        for s, (width_s, blocks, stride) in enumerate(
                zip(self.stage_widths, self.blocks_per_stage, self.stage_strides)):
            for b in range(blocks):
                h, w = step(f"stage{s}.block{b}", width_s, h, w, stride if b == 0 else 1)
        trace.append(("reduce", self.out_channels, h, w))
        return trace

    def check_geometry(self, height, width):
        trace = self.shape_trace(height, width)
        _, _, h, w = trace[-1]
        if (h, w) != self.out_spatial:
            lines = [f"{name}: {c}x{hh}x{ww}" for name, c, hh, ww in trace]
            raise GeometryError(
                f"input {height}x{width} yields features {h}x{w}, expected "
                f"{self.out_spatial[0]}x{self.out_spatial[1]}", lines)

    def input_size_for(self):
        """Smallest square input side reaching ``out_spatial`` (square configs)."""
        side = self.out_spatial[0]
        for stride in reversed([self.stem_stride] + self.stage_strides):
            side *= stride
        return side


class ConvBN(Module):
    """conv → (batchnorm); convs feeding a batchnorm carry no bias."""

    def __init__(self, rng, in_ch, out_ch, kernel, stride, padding, use_bn):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(rng, in_ch, out_ch, kernel, stride, padding,
                                                     bias=not use_bn, floor_mode=True))
        self.bn = self.add_child("bn", BatchNorm2d(out_ch)) if use_bn else None

    def __call__(self, x, training):
        y = self.conv(x)
        return self.bn(y, training) if self.bn is not None else y


class ResidualBlock(Module):
    """Two 3×3 convs on the main path plus an identity or 1×1 projection shortcut."""

    def __init__(self, rng, in_ch, out_ch, stride=1, use_bn=True):
        super().__init__()
        self.conv1 = self.add_child("conv1", ConvBN(rng, in_ch, out_ch, 3, stride, 1, use_bn))
        self.conv2 = self.add_child("conv2", ConvBN(rng, out_ch, out_ch, 3, 1, 1, use_bn))
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = self.add_child("shortcut", ConvBN(rng, in_ch, out_ch, 1, stride, 0, use_bn))

    def __call__(self, x, training):
        main = self.conv2(T.relu(self.conv1(x, training)), training)
        skip = x if self.shortcut is None else self.shortcut(x, training)
        if main.shape != skip.shape:
            raise ShapeError("residual_block", main.shape, skip.shape, detail="main vs shortcut")
        return T.relu(main + skip)


def residual_block(x, block, training=True):
    return block(x, training)


class Backbone(Module):
    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        bn = config.use_batchnorm
        widths = config.stage_widths
        self.stem = self.add_child("stem", ConvBN(rng, config.input_channels, widths[0], 3,
                                                  config.stem_stride, 1, bn))
        self.blocks = []
        in_ch = widths[0]
        for s, (width, n_blocks, stride) in enumerate(
                zip(widths, config.blocks_per_stage, config.stage_strides)):
            for b in range(n_blocks):
                block = ResidualBlock(rng, in_ch, width, stride if b == 0 else 1, bn)
                self.blocks.append(self.add_child(f"stage{s}.block{b}", block))
                in_ch = width
        self.reduce = self.add_child("reduce", Conv2d(rng, in_ch, config.out_channels, 1))

    def __call__(self, images, training=True):
        if images.ndim != 4 or images.shape[1] != self.config.input_channels:
            raise ShapeError("backbone", images.shape,
                             detail=f"expected N×{self.config.input_channels}×H×W")
        self.config.check_geometry(images.shape[2], images.shape[3])
        x = T.relu(self.stem(images, training))
        for block in self.blocks:
            x = block(x, training)
        return T.relu(self.reduce(x))


def backbone_forward(images, backbone, training=True):
    return backbone(images, training)
