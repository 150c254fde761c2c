"""Bilinear head: Net-B projection, mean fusion, self outer-product pooling."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Conv2d, Linear, Module


@dataclass
class BilinearConfig:
    channels: int = 20
    num_classes: int = 5
    feature_spatial: tuple = (8, 8)

    def __post_init__(self):
        self.feature_spatial = tuple(self.feature_spatial)
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")

    @property
    def pooled_size(self):
        return self.channels * self.channels


class NetB(Module):
    """Full-extent convolution (one output pixel per filter) followed by ReLU."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        self.conv = self.add_child("conv", Conv2d(rng, config.channels, config.channels,
                                                  config.feature_spatial))

    def __call__(self, features):
        if features.ndim != 4 or tuple(features.shape[2:]) != self.config.feature_spatial:
            raise ShapeError("net_b", features.shape,
                             detail=f"expected spatial {self.config.feature_spatial}")
        return T.flatten(T.relu(self.conv(features)))


def net_b_forward(features, net):
    return net(features)


def m_operator(x, y):
    """Elementwise mean of the two branch outputs."""
    if x.shape != y.shape:
        raise ShapeError("m_operator", x.shape, y.shape)
    return T.mul(T.add(x, y), 0.5)


def bilinear_pool(z):
    """N×C → N×C²: row-major ``z zᵀ``, signed square root, unit L2 norm."""
    if z.ndim != 2:
        raise ShapeError("bilinear_pool", z.shape, detail="expected N×C")
    n, c = z.shape
    b = T.reshape(T.outer_product(z), (n, c * c))
    return T.l2_normalize(T.signed_sqrt(b))


class Classifier(Linear):
    """Single affine layer from the pooled descriptor to class logits."""

    def __init__(self, rng, in_features, num_classes):
        super().__init__(rng, in_features, num_classes)


def classify(pooled, classifier):
    return classifier(pooled)
