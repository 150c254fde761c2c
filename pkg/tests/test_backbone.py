import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biranet import tensor as T
from biranet.backbone import Backbone, BackboneConfig, ResidualBlock, backbone_forward, residual_block
from biranet.errors import ConfigError, GeometryError
from biranet.gradcheck import grad_check
from biranet.layers import BatchNorm2d
from biranet.tensor import Tensor


def zero_main_path(block):
    for conv in (block.conv1, block.conv2):
        conv.conv.weight.data[...] = 0.0


def test_zero_main_path_identity_shortcut_gives_relu():
    rng = np.random.default_rng(0)
    block = ResidualBlock(rng, 3, 3, stride=1)
    zero_main_path(block)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    np.testing.assert_array_equal(residual_block(x, block).data, np.maximum(x.data, 0))


def test_stride_two_block_halves_spatial_dims():
    block = ResidualBlock(np.random.default_rng(1), 4, 8, stride=2)
    assert block.shortcut is not None
    out = block(Tensor(np.ones((1, 4, 6, 10))), training=True)
    assert out.shape == (1, 8, 3, 5)


def test_residual_gradients_through_both_branches():
    rng = np.random.default_rng(2)
    block = ResidualBlock(rng, 2, 4, stride=2)
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    proj = Tensor(rng.normal(size=(2, 4, 2, 2)))
    fn = lambda: T.sum_all(T.mul(block(x, True), proj))  # noqa: E731
    shortcut_w = block.shortcut.conv.weight
    main_w = block.conv1.conv.weight
    assert grad_check(fn, [x, shortcut_w, main_w]) < 1e-4


def test_desk_config_shape_contract():
    cfg = BackboneConfig(stage_widths=[16, 32], stem_stride=1, stage_strides=[2, 2],
                         out_channels=20, out_spatial=(8, 8))
    net = Backbone(cfg, np.random.default_rng(0))
    out = backbone_forward(Tensor(np.random.default_rng(1).normal(size=(2, 3, 32, 32))), net)
    assert out.shape == (2, 20, 8, 8)


def test_identical_images_give_identical_rows_in_eval_mode():
    cfg = BackboneConfig()
    net = Backbone(cfg, np.random.default_rng(0))
    img = np.random.default_rng(3).normal(size=(1, 3, 64, 64))
    out = net(Tensor(np.repeat(img, 3, axis=0)), training=False).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_same_seed_is_bitwise_deterministic():
    x = Tensor(np.random.default_rng(5).normal(size=(2, 3, 64, 64)))
    outs = [Backbone(BackboneConfig(), np.random.default_rng(9))(x).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def test_geometry_error_lists_trace():
    net = Backbone(BackboneConfig(), np.random.default_rng(0))
    with pytest.raises(GeometryError) as info:
        net(Tensor(np.zeros((1, 3, 40, 40))))
    assert info.value.trace[0].startswith("input")
    assert any("reduce" in line for line in info.value.trace)
    assert "shape trace" in str(info.value)


@pytest.mark.parametrize("kwargs", [
    {"out_channels": 21},
    {"stage_widths": [16], "blocks_per_stage": [1, 1]},
    {"stage_widths": [], "blocks_per_stage": []},
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


def test_hierarchical_parameter_names():
    names = [n for n, _ in Backbone(BackboneConfig(), np.random.default_rng(0)).named_parameters()]
    assert "stem.conv.weight" in names
    assert "stage1.block0.shortcut.bn.gamma" in names
    assert names[-1] == "reduce.bias"


def test_batchnorm_training_output_is_standardised():
    rng = np.random.default_rng(7)
    bn = BatchNorm2d(3)
    x = Tensor(rng.normal(loc=5.0, scale=300.0, size=(4, 3, 6, 6)))
    out = bn(x, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-6)


def test_batchnorm_running_stats_and_eval_mode():
    bn = BatchNorm2d(1)
    x = np.arange(8.0).reshape(2, 1, 2, 2)
    bn(Tensor(x), training=True)
    np.testing.assert_allclose(bn.running_mean, [0.1 * 3.5])
    np.testing.assert_allclose(bn.running_var, [0.9 + 0.1 * x.var(ddof=1)])
    out = bn(Tensor(x), training=False).data
    np.testing.assert_allclose(out, (x - bn.running_mean[0]) / np.sqrt(bn.running_var[0] + 1e-5))


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=3), st.data())
def test_prop_output_shape_for_valid_configs(widths, data):
    n = len(widths)
    blocks = data.draw(st.lists(st.integers(1, 2), min_size=n, max_size=n))
    strides = data.draw(st.lists(st.sampled_from([1, 2]), min_size=n, max_size=n))
    stem = data.draw(st.sampled_from([1, 2]))
    k = data.draw(st.integers(1, 3))
    side = data.draw(st.integers(1, 3))
    cfg = BackboneConfig(stage_widths=widths, blocks_per_stage=blocks, stage_strides=strides,
                         stem_stride=stem, out_channels=5 * k, out_spatial=(side, side))
    size = cfg.input_size_for()
    net = Backbone(cfg, np.random.default_rng(0))
    out = net(Tensor(np.random.default_rng(1).normal(size=(2, 3, size, size))))
    assert out.shape == (2, 5 * k, side, side)
