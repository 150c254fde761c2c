import json
import shutil

import numpy as np
import pytest

from biranet.data import DatasetManifest, GeneratorConfig, generate_synthetic, weighted_sampler
from biranet.errors import ConfigError, TrainingError
from biranet.loss import cross_entropy_baseline
from biranet.metrics import read_confusion_csv
from biranet.model import VARIANTS, ModelVariant, build_variant, config_hash
from biranet.tensor import Tape, Tensor
from biranet.training import (OptimizerState, TrainConfig, dataset_stats, epochs_to_threshold, evaluate,
                              load_checkpoint, load_dataset, read_log, save_checkpoint, sgd_step, smoothed,
                              train)


def small_variant(kind="bira_net", loss="grading"):
    return ModelVariant.build(kind, loss, image_size=16, maps_per_class=2, stage_widths=(4, 8), out_spatial=4)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("trainer_ds")
    generate_synthetic(out, GeneratorConfig(seed=5, per_class_count=4, val_per_class=2, image_size=64))
    return out


FAST = dict(epochs=2, batch_size=5, learning_rate=0.02, seed=1)


# ---------------------------------------------------------------- optimizer


def test_sgd_hand_iteration():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = OptimizerState(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    w.grad = np.array([1.0])
    sgd_step({"w": w}, opt)
    assert w.data[0] == pytest.approx(0.9)
    w.grad = np.array([1.0])
    sgd_step({"w": w}, opt)
    # v = 0.9 * 1 + 1 = 1.9
    assert w.data[0] == pytest.approx(0.71)
    assert opt.velocity["w"][0] == pytest.approx(1.9)


def test_weight_decay_enters_velocity():
    w = Tensor(np.array([2.0]), requires_grad=True)
    w.grad = np.array([0.0])
    opt = OptimizerState(learning_rate=0.5, momentum=0.0, weight_decay=0.1)
    sgd_step({"w": w}, opt)
    assert w.data[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_velocity_decays_geometrically_without_gradient_signal():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = OptimizerState(learning_rate=0.0, momentum=0.5, weight_decay=0.0)
    w.grad = np.array([8.0])
    sgd_step({"w": w}, opt)
    for k in range(1, 4):
        w.grad = np.array([0.0])
        sgd_step({"w": w}, opt)
        assert opt.velocity["w"][0] == 8.0 * 0.5 ** k


def test_missing_gradient_raises_before_any_update():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    a.grad = np.array([1.0])
    with pytest.raises(TrainingError, match="'b'"):
        sgd_step({"a": a, "b": b}, OptimizerState())
    assert a.data[0] == 1.0


def test_optimizer_and_train_config_validation():
    with pytest.raises(ConfigError):
        OptimizerState(momentum=1.0)
    with pytest.raises(ConfigError):
        OptimizerState(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------- variants


@pytest.mark.parametrize("kind", VARIANTS)
def test_build_variant_is_deterministic(kind):
    v = small_variant(kind)
    a, b = build_variant(v, 3).state_dict(), build_variant(v, 3).state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = build_variant(v, 4).state_dict()
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_presence_rules():
    full = small_variant("bira_net")
    with pytest.raises(ConfigError):
        ModelVariant("resnet_only", full.backbone, attention=full.attention)
    with pytest.raises(ConfigError):
        ModelVariant("bira_net", full.backbone, attention=full.attention)
    with pytest.raises(ConfigError):
        ModelVariant("ra_net", full.backbone, bilinear=full.bilinear)
    with pytest.raises(ConfigError):
        ModelVariant("vgg", full.backbone)
    with pytest.raises(ConfigError):
        ModelVariant.build(image_size=48, out_spatial=8)


def test_variant_dict_round_trip():
    v = small_variant("bira_net", "cross_entropy")
    assert ModelVariant.from_dict(v.to_dict()) == v
    assert config_hash(v.to_dict()) == config_hash(ModelVariant.from_dict(v.to_dict()).to_dict())


# ---------------------------------------------------------------- learning


# the default attention quotient feeds the classifier inputs ~10x larger than
# the other heads, so it needs a smaller step; the unit-norm bilinear
# descriptors need the classifier weights to grow and take longer
@pytest.mark.parametrize("kind,lr,steps,target", [
    ("resnet_only", 0.05, 200, 0.05),
    ("ra_net", 0.001, 200, 0.05),
    ("bi_resnet", 0.05, 300, 0.15),
    ("bira_net", 0.01, 600, 0.15),
])
def test_overfits_a_tiny_batch(kind, lr, steps, target):
    rng = np.random.default_rng(0)
    model = build_variant(small_variant(kind), 0)
    x = rng.normal(size=(8, 3, 16, 16))
    y = np.array([0, 1, 2, 3, 4, 0, 1, 2])
    params = dict(model.named_parameters())
    opt = OptimizerState(learning_rate=lr, momentum=0.9, weight_decay=0.0)
    for _ in range(steps):
        model.zero_grad()
        with Tape() as tape:
            loss = cross_entropy_baseline(model(Tensor(x), training=True), y)
        tape.backward(loss)
        sgd_step(params, opt)
    assert loss.item() < target
    assert (model.predict(x) == y).all()


def test_zero_learning_rate_keeps_parameters(data_dir):
    v = small_variant()
    before = {k: p.data.copy() for k, p in build_variant(v, 1).named_parameters()}
    res = train(v, data_dir, TrainConfig(**{**FAST, "learning_rate": 0.0}))
    # batch-norm running statistics still move; trainable parameters must not
    after = dict(res.model.named_parameters())
    assert all(before[k].tobytes() == after[k].data.tobytes() for k in before)


def test_same_seed_gives_identical_logs_and_checkpoints(data_dir, tmp_path):
    v = small_variant()
    for name in ("a", "b"):
        train(v, data_dir, TrainConfig(**FAST, checkpoint_every=1), tmp_path / name)
    for rel in ("log.csv", "checkpoint.ntc", "checkpoint.json", "metrics.json", "confusion.csv",
                "checkpoints/epoch_001.ntc"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    rows = read_log(tmp_path / "a" / "log.csv")
    assert [r["epoch"] for r in rows] == [1, 2]


def test_checkpoint_round_trip_is_idempotent(data_dir, tmp_path):
    res = train(small_variant(), data_dir, TrainConfig(**FAST), tmp_path / "run")
    model, opt, meta = load_checkpoint(tmp_path / "run" / "checkpoint")
    assert meta["epoch"] == 2 and meta["config"] == json.loads(json.dumps(res.run_config))
    save_checkpoint(tmp_path / "again", model, opt, meta["epoch"], meta["rng_state"], meta["config"])
    for suffix in (".ntc", ".json"):
        assert ((tmp_path / "run" / "checkpoint").with_suffix(suffix).read_bytes()
                == (tmp_path / "again").with_suffix(suffix).read_bytes())
    stats = dataset_stats(data_dir)
    val = load_dataset(data_dir, "val", stats, 16)
    cm, _ = evaluate(model, val.images, val.labels)
    assert cm == read_confusion_csv(tmp_path / "run" / "confusion.csv")


def test_load_checkpoint_errors(data_dir, tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")
    train(small_variant(), data_dir, TrainConfig(**{**FAST, "epochs": 1}), tmp_path / "run")
    side = tmp_path / "run" / "checkpoint.json"
    side.write_text(side.read_text().replace('"batch_size": 5', '"batch_size": 6'))
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "run" / "checkpoint")


def test_untrained_model_is_near_chance_and_oracle_is_perfect():
    rng = np.random.default_rng(2)
    model = build_variant(small_variant("resnet_only"), 7)
    x = rng.normal(size=(200, 3, 16, 16))
    truth = rng.integers(0, 5, size=200)
    cm, metrics = evaluate(model, x, truth)
    assert cm.total == 200 and 0.1 <= metrics["aca"] <= 0.3

    class Oracle:
        variant = model.variant

        def predict(self, images, batch_size=64):
            return truth

    assert evaluate(Oracle(), x, truth)[1]["aca"] == 1.0


def test_empty_inputs_raise(data_dir, tmp_path):
    model = build_variant(small_variant(), 0)
    with pytest.raises(ValueError):
        evaluate(model, np.zeros((0, 3, 16, 16)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError, match="no records"):
        weighted_sampler(DatasetManifest([], (32, 32), "train"), 0)
    empty = tmp_path / "empty"
    shutil.copytree(data_dir, empty)
    (empty / "train.csv").write_text((empty / "train.csv").read_text().splitlines()[0] + "\n")
    with pytest.raises(ValueError, match="empty"):
        train(small_variant(), empty, TrainConfig(**FAST))


def test_smoothing_and_threshold_helpers():
    np.testing.assert_allclose(smoothed([3, 2, 1, 0]), [2, 1])
    np.testing.assert_array_equal(smoothed([1, 2]), [1, 2])
    rows = [{"epoch": 1, "val_aca": 0.3}, {"epoch": 2, "val_aca": 0.61}, {"epoch": 3, "val_aca": 0.7}]
    assert epochs_to_threshold(rows, 0.6) == 2
    assert epochs_to_threshold(rows, 0.9) is None
