"""Finite-difference gradient suite, grouped into scopes.

Each check builds a scalar function of a few random tensors.  Elementwise
and tensor-valued ops are reduced with a random cotangent, ``sum(op(x) * R)``,
so every output entry carries a distinct weight.  Points that sit within
``MARGIN`` of a kink (ReLU, signed sqrt at 0, clamped divisors) or of an
argmax tie are skipped and replaced by the next seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, NetA, attention_output
from .backbone import Backbone, BackboneConfig, ResidualBlock
from .bilinear import BilinearConfig, Classifier, NetB, bilinear_pool, m_operator
from .gradcheck import grad_check
from .loss import cross_entropy_baseline, grading_loss
from .model import ModelVariant, build_variant
from .tensor import Tensor, margin_monitor

SCOPES = ("ops", "attention", "bilinear", "loss", "full")
TOLERANCE = 1e-4
MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    scope: str
    seeds: int
    skipped: int
    worst: float
    seconds: float

    @property
    def passed(self):
        return self.seeds > 0 and self.worst < TOLERANCE


def _rand(rng, *shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        # keep magnitudes away from zero, random sign
        x = np.sign(x) * rng.uniform(low, 2.0, size=shape)
    return Tensor(x)


def _contract(out, rng):
    return T.sum_all(T.mul(out, Tensor(rng.normal(size=out.shape))))


def _cotangent(op, *arg_specs):
    """Builder for ``sum(op(*args) * R)`` over fresh random arguments."""

    def build(rng):
        args = [spec(rng) for spec in arg_specs]
        proj = Tensor(rng.normal(size=op(*args).shape))
        return (lambda: T.sum_all(T.mul(op(*args), proj))), args, True

    return build


def _tie_free(logits, gap=MARGIN):
    top2 = np.sort(logits, axis=-1)[..., -2:]
    return bool(np.all(top2[..., 1] - top2[..., 0] > gap))


# ---------------------------------------------------------------- ops


def _bn_builder(training):
    def build(rng):
        x = _rand(rng, 3, 2, 2, 2)
        g, b = _rand(rng, 2), _rand(rng, 2)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
        proj = Tensor(rng.normal(size=x.shape))

        def fn():
            # running stats copied so repeated probes see identical buffers
            return T.sum_all(T.mul(T.batch_norm(x, g, b, rm.copy(), rv.copy(), training), proj))

        return fn, [x, g, b], True

    return build


def _pick_builder(rng):
    x = _rand(rng, 4, 5)
    idx = rng.integers(0, 5, size=4)
    proj = Tensor(rng.normal(size=4))
    return (lambda: T.sum_all(T.mul(T.pick(x, idx), proj))), [x], True


def _conv_builder(n, c, h, w, o, k, stride, padding, bias):
    def build(rng):
        x, wt = _rand(rng, n, c, h, w), _rand(rng, o, c, k, k)
        args = [x, wt] + ([_rand(rng, o)] if bias else [])
        out_shape = T.conv2d(x, wt, args[2] if bias else None, stride, padding).shape
        proj = Tensor(rng.normal(size=out_shape))

        def fn():
            return T.sum_all(T.mul(T.conv2d(x, wt, args[2] if bias else None, stride, padding), proj))

        return fn, args, True

    return build


def _s(*shape, low=None):
    return lambda rng: _rand(rng, *shape, low=low)


OPS = {
    "add": _cotangent(T.add, _s(3, 4), _s(3, 4)),
    "sub": _cotangent(T.sub, _s(3, 4), _s(3, 4)),
    "mul": _cotangent(T.mul, _s(3, 4), _s(3, 4)),
    "div": _cotangent(T.div, _s(3, 4), _s(3, 4, low=0.5)),
    "scalar_mul": _cotangent(lambda a: T.mul(a, 2.5), _s(3, 4)),
    "matmul": _cotangent(T.matmul, _s(3, 4), _s(4, 2)),
    "linear": _cotangent(T.linear, _s(3, 4), _s(5, 4), _s(5)),
    "conv2d": _conv_builder(1, 2, 4, 4, 3, 3, 1, 0, False),
    "conv2d_stride2_pad1": _conv_builder(2, 2, 5, 5, 3, 3, 2, 1, True),
    "conv2d_1x1": _conv_builder(2, 3, 3, 3, 4, 1, 1, 0, True),
    "relu": _cotangent(T.relu, _s(3, 4)),
    "sigmoid": _cotangent(T.sigmoid, _s(3, 4)),
    "global_avg_pool": _cotangent(T.global_avg_pool, _s(2, 3, 3, 2)),
    "outer_product": _cotangent(T.outer_product, _s(4)),
    "outer_product_batch": _cotangent(T.outer_product, _s(3, 4)),
    "signed_sqrt": _cotangent(T.signed_sqrt, _s(3, 4, low=0.05)),
    "l2_normalize": _cotangent(T.l2_normalize, _s(3, 5)),
    "log_softmax": _cotangent(T.log_softmax, _s(3, 5)),
    "reshape": _cotangent(lambda a: T.reshape(a, (4, 3)), _s(3, 4)),
    "mean": _cotangent(T.mean_all, _s(3, 4)),
    "pick": _pick_builder,
    "batch_norm_train": _bn_builder(True),
    "batch_norm_eval": _bn_builder(False),
}


# ---------------------------------------------------------------- attention


def _net_a_builder(rng):
    cfg = AttentionConfig(channels=4)
    net = NetA(cfg, rng)
    feats = Tensor(rng.uniform(0.2, 2.0, size=(2, 4, 3, 3)))
    proj = Tensor(rng.normal(size=feats.shape))
    return (lambda: T.sum_all(T.mul(net(feats), proj))), [feats] + net.parameters(), True


def _attention_output_builder(inverted):
    def build(rng):
        a = Tensor(rng.uniform(0.1, 0.9, size=(2, 3, 2, 2)))
        f = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 2, 2)) * rng.choice([-1, 1], size=(1, 3, 1, 1)))
        proj = Tensor(rng.normal(size=(2, 3)))
        return (lambda: T.sum_all(T.mul(attention_output(a, f, inverted), proj))), [a, f], True

    return build


def _attention_chain_builder(inverted):
    def build(rng):
        net = NetA(AttentionConfig(channels=4), rng)
        feats = Tensor(rng.uniform(0.2, 2.0, size=(2, 4, 3, 3)))
        proj = Tensor(rng.normal(size=(2, 4)))

        def fn():
            return T.sum_all(T.mul(attention_output(net(feats), feats, inverted), proj))

        return fn, [feats] + net.parameters(), True

    return build


ATTENTION = {
    "net_a": _net_a_builder,
    "attention_output": _attention_output_builder(False),
    "attention_output_inverted": _attention_output_builder(True),
    "net_a_attention_output": _attention_chain_builder(False),
    "net_a_attention_output_inverted": _attention_chain_builder(True),
}


# ---------------------------------------------------------------- bilinear


def _net_b_builder(rng):
    net = NetB(BilinearConfig(channels=4, feature_spatial=(3, 3)), rng)
    feats = _rand(rng, 1, 4, 3, 3)
    proj = Tensor(rng.normal(size=(1, 4)))
    return (lambda: T.sum_all(T.mul(net(feats), proj))), [feats] + net.parameters(), True


def _head_builder(rng):
    c = 4
    x, y = _rand(rng, 2, c, low=0.2), _rand(rng, 2, c, low=0.2)
    clf = Classifier(rng, c * c, 5)
    proj = Tensor(rng.normal(size=(2, 5)))

    def fn():
        return T.sum_all(T.mul(clf(bilinear_pool(m_operator(x, y))), proj))

    ok = np.all(np.abs(x.data + y.data) > 0.1)
    return fn, [x, y] + clf.parameters(), bool(ok)


BILINEAR = {
    "net_b": _net_b_builder,
    "m_operator": _cotangent(m_operator, _s(3, 4), _s(3, 4)),
    "bilinear_pool": _cotangent(bilinear_pool, _s(2, 4, low=0.2)),
    "classify_bilinear_m": _head_builder,
}


# ---------------------------------------------------------------- loss


def _loss_builder(loss_fn):
    def build(rng):
        x = _rand(rng, 4, 5)
        y = rng.integers(0, 5, size=4)
        return (lambda: loss_fn(x, y)), [x], _tie_free(x.data)

    return build


LOSS = {
    "grading_loss": _loss_builder(grading_loss),
    "grading_loss_sum": _loss_builder(lambda x, y: grading_loss(x, y, reduction="sum")),
    "cross_entropy": _loss_builder(cross_entropy_baseline),
}


# ---------------------------------------------------------------- full pipeline


def tiny_variant(kind="bira_net", inverted=False, loss="grading"):
    return ModelVariant.build(kind, loss, image_size=8, maps_per_class=2, stage_widths=(4, 8),
                              out_spatial=4, inverted=inverted)


def _residual_builder(stride, in_ch, out_ch):
    def build(rng):
        block = ResidualBlock(rng, in_ch, out_ch, stride, use_bn=True)
        x = _rand(rng, 2, in_ch, 4, 4)
        proj = Tensor(rng.normal(size=block(x, True).shape))
        return (lambda: T.sum_all(T.mul(block(x, True), proj))), [x] + block.parameters(), True

    return build


def _backbone_builder(rng):
    cfg = BackboneConfig(stage_widths=[4, 8], stage_strides=[1, 2], stem_stride=1,
                         out_channels=10, out_spatial=(4, 4))
    net = Backbone(cfg, rng)
    x = _rand(rng, 2, 3, 8, 8)
    proj = Tensor(rng.normal(size=(2, 10, 4, 4)))
    return (lambda: T.sum_all(T.mul(net(x, True), proj))), [x] + net.parameters(), True


def _model_builder(kind, inverted=False, loss="grading"):
    def build(rng):
        variant = tiny_variant(kind, inverted, loss)
        model = build_variant(variant, int(rng.integers(2**31)))
        x = _rand(rng, 2, 3, 8, 8)
        y = rng.integers(0, 5, size=2)
        loss_fn = grading_loss if loss == "grading" else cross_entropy_baseline
        ok = _tie_free(model(x, training=True).data)
        return (lambda: loss_fn(model(x, training=True), y)), [x] + model.parameters(), ok

    return build


FULL = {
    "residual_block_identity": _residual_builder(1, 4, 4),
    "residual_block_projection": _residual_builder(2, 3, 6),
    "backbone": _backbone_builder,
    "bira_net_grading": _model_builder("bira_net"),
    "bira_net_inverted_grading": _model_builder("bira_net", inverted=True),
    "bira_net_cross_entropy": _model_builder("bira_net", loss="cross_entropy"),
    "ra_net_grading": _model_builder("ra_net"),
    "bi_resnet_grading": _model_builder("bi_resnet"),
    "resnet_only_grading": _model_builder("resnet_only"),
}

REGISTRY = {"ops": OPS, "attention": ATTENTION, "bilinear": BILINEAR, "loss": LOSS, "full": FULL}
_MAX_COORDS = {"full": 6}
# the full-model checks have thousands of ReLU inputs; a perturbation of
# 1e-5 moves each by far less than this
_MARGINS = {"full": 1e-4}
# central differences of a loss f carry ~|f| * 1e-11 of roundoff at eps=1e-5,
# which is already 1e-7 * TOLERANCE when |f| ~ 1; whole-model checks use a
# floor of 1e-6 * max(1, |f|) to stay clear of it
FLOOR = 1e-7
_FLOORS = {"full": 1e-6}


def run_check(name, build, scope, seeds=20, base_seed=0, max_coords=None, eps=1e-5, margin=MARGIN,
              floor=FLOOR, scaled=False):
    """Worst relative error over ``seeds`` clean random points."""
    start = time.perf_counter()
    worst, done, skipped = 0.0, 0, 0
    attempt = 0
    while done < seeds and attempt < 4 * seeds:
        rng = np.random.default_rng([base_seed, attempt, sum(map(ord, name))])
        attempt += 1
        fn, inputs, ok = build(rng)
        if ok:
            with margin_monitor() as mon:
                f0 = abs(fn().item())
            ok = mon.margin > margin
        if not ok:
            skipped += 1
            continue
        point_floor = floor * max(1.0, f0) if scaled else floor
        worst = max(worst, grad_check(fn, inputs, eps=eps, floor=point_floor,
                                      max_coords=max_coords, rng=rng))
        done += 1
    return CheckResult(name, scope, done, skipped, worst, time.perf_counter() - start)


def run_scope(scope, seeds=None, base_seed=0):
    if scope not in REGISTRY:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    n = seeds if seeds is not None else 20
    return [run_check(name, build, scope, n, base_seed, _MAX_COORDS.get(scope),
                      margin=_MARGINS.get(scope, MARGIN), floor=_FLOORS.get(scope, FLOOR),
                      scaled=scope in _FLOORS)
            for name, build in REGISTRY[scope].items()]


def format_report(results):
    lines = [f"{'scope':<10}{'check':<34}{'seeds':>6}{'skip':>6}{'worst rel err':>16}  status"]
    for r in results:
        lines.append(f"{r.scope:<10}{r.name:<34}{r.seeds:>6}{r.skipped:>6}{r.worst:>16.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
