"""The four ablation architectures and their configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, NetA, attention_output
from .backbone import Backbone, BackboneConfig
from .bilinear import BilinearConfig, Classifier, NetB, bilinear_pool, m_operator
from .errors import ConfigError
from .layers import Module
from .loss import LOSS_KINDS
from .rng import substream

VARIANTS = ("resnet_only", "bi_resnet", "ra_net", "bira_net")
_NEEDS_ATTENTION = {"ra_net", "bira_net"}
_NEEDS_BILINEAR = {"bi_resnet", "bira_net"}


@dataclass
class ModelVariant:
    kind: str
    backbone: BackboneConfig
    attention: AttentionConfig | None = None
    bilinear: BilinearConfig | None = None
    loss: str = "grading"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in VARIANTS:
            raise ConfigError(f"unknown variant {self.kind!r}; choose from {VARIANTS}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {LOSS_KINDS}")
        wants_attn = self.kind in _NEEDS_ATTENTION
        wants_bil = self.kind in _NEEDS_BILINEAR
        if wants_attn != (self.attention is not None):
            raise ConfigError(f"{self.kind}: attention config must be "
                              f"{'present' if wants_attn else 'absent'}")
        if wants_bil != (self.bilinear is not None):
            raise ConfigError(f"{self.kind}: bilinear config must be "
                              f"{'present' if wants_bil else 'absent'}")
        c = self.backbone.out_channels
        if self.attention is not None and self.attention.channels != c:
            raise ConfigError(f"attention channels {self.attention.channels} != backbone out_channels {c}")
        if self.bilinear is not None:
            if self.bilinear.channels != c:
                raise ConfigError(f"bilinear channels {self.bilinear.channels} != backbone out_channels {c}")
            if self.bilinear.feature_spatial != self.backbone.out_spatial:
                raise ConfigError("bilinear feature_spatial must match backbone out_spatial")
            if self.bilinear.num_classes != self.backbone.num_classes:
                raise ConfigError("bilinear num_classes must match backbone num_classes")

    @property
    def num_classes(self):
        return self.backbone.num_classes

    @classmethod
    def build(cls, kind="bira_net", loss="grading", image_size=64, maps_per_class=4,
              num_classes=5, stage_widths=(16, 32), blocks_per_stage=(1, 1),
              out_spatial=8, inverted=False, use_batchnorm=True):
        """Consistent sub-configs for a square input of side ``image_size``."""
        n_stages = len(stage_widths)
        strides = _strides_for(image_size, out_spatial, n_stages)
        backbone = BackboneConfig(
            stage_widths=list(stage_widths), blocks_per_stage=list(blocks_per_stage),
            stage_strides=strides[1:], stem_stride=strides[0],
            out_channels=maps_per_class * num_classes, out_spatial=(out_spatial, out_spatial),
            num_classes=num_classes, use_batchnorm=use_batchnorm)
        c = backbone.out_channels
        attention = AttentionConfig(channels=c, inverted=inverted) if kind in _NEEDS_ATTENTION else None
        bilinear = (BilinearConfig(channels=c, num_classes=num_classes,
                                   feature_spatial=backbone.out_spatial)
                    if kind in _NEEDS_BILINEAR else None)
        return cls(kind, backbone, attention, bilinear, loss)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            backbone=BackboneConfig(**d["backbone"]),
            attention=AttentionConfig(**d["attention"]) if d.get("attention") else None,
            bilinear=BilinearConfig(**d["bilinear"]) if d.get("bilinear") else None,
            loss=d.get("loss", "grading"),
        )


def _strides_for(image_size, out_spatial, n_stages):
    if image_size % out_spatial:
        raise ConfigError(f"image_size {image_size} is not a multiple of feature size {out_spatial}")
    ratio = image_size // out_spatial
    halvings = int(round(np.log2(ratio)))
    if 2 ** halvings != ratio or halvings > n_stages + 1:
        raise ConfigError(f"cannot reduce {image_size} to {out_spatial} with {n_stages} stages + stem")
    # downsample in the deepest positions first, stem last
    strides = [1] * (n_stages + 1)
    for i in range(halvings):
        strides[(n_stages - i) % (n_stages + 1)] = 2
    return strides


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class GradingNet(Module):
    """Backbone plus the head wiring selected by ``variant.kind``."""

    def __init__(self, variant, rng):
        super().__init__()
        self.variant = variant
        k = variant.kind
        c = variant.backbone.out_channels
        self.backbone = self.add_child("backbone", Backbone(variant.backbone, rng))
        self.net_a = self.add_child("net_a", NetA(variant.attention, rng)) if variant.attention else None
        self.net_b = self.add_child("net_b", NetB(variant.bilinear, rng)) if variant.bilinear else None
        in_features = c * c if k in _NEEDS_BILINEAR else c
        self.classifier = self.add_child("classifier", Classifier(rng, in_features, variant.num_classes))

    def features(self, images, training=True):
        return self.backbone(images, training)

    def head_input(self, feats):
        """Descriptor fed to the classifier, from backbone features."""
        k = self.variant.kind
        if k == "resnet_only":
            return T.global_avg_pool(feats)
        if k == "bi_resnet":
            return bilinear_pool(self.net_b(feats))
        attn_cfg = self.variant.attention
        x = attention_output(self.net_a(feats), feats, attn_cfg.inverted, attn_cfg.epsilon)
        if k == "ra_net":
            return x
        return bilinear_pool(m_operator(x, self.net_b(feats)))

    def __call__(self, images, training=True):
        if not isinstance(images, T.Tensor):
            images = T.Tensor(images)
        return self.classifier(self.head_input(self.features(images, training)))

    def predict(self, images, batch_size=64):
        """Eval-mode argmax predictions for an N×3×H×W array, no tape."""
        preds = []
        for start in range(0, len(images), batch_size):
            logits = self(T.Tensor(images[start:start + batch_size]), training=False)
            preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def build_variant(config, seed):
    """Deterministically initialised model for ``config``."""
    config.validate()
    return GradingNet(config, substream(seed, "init"))
