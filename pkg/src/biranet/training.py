"""SGD with momentum, the training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import serialization
from .data import (augment, load_image, load_split, preprocess,
                   read_stats, standardize, weighted_sampler)
from .errors import ConfigError, TrainingError
from .loss import get_loss
from .metrics import ConfusionMatrix, summary, write_confusion_csv, write_metrics_json
from .model import ModelVariant, build_variant, config_hash
from .rng import substream, substream_seed
from .tensor import Tape, Tensor, diagnostics

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "val_aca", "val_macro_f1", "val_micro_f1")


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-7
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")


def sgd_step(params, state):
    """One momentum step over ``{name: Tensor}`` using each tensor's ``.grad``.

    v ← μ·v + (g + λ·w);  w ← w − η·v
    """
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"sgd_step: parameter {name!r} has no gradient")
    for name, p in params.items():
        g = p.grad + state.weight_decay * p.data
        v = state.velocity.get(name)
        v = g if v is None else state.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - state.learning_rate * v
    return params, state


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-7
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


# ---------------------------------------------------------------- data loading


@dataclass
class LoadedSplit:
    images: np.ndarray  # N×3×H×W standardized
    labels: np.ndarray
    manifest: object


def load_dataset(root, split, stats, image_size):
    manifest = load_split(root, split)
    if len(manifest) == 0:
        raise ValueError(f"{split} manifest under {root} is empty")
    imgs = [standardize(preprocess(load_image(manifest.path(i)), image_size), stats)
            for i in range(len(manifest))]
    arr = np.stack(imgs).transpose(0, 3, 1, 2).copy()
    return LoadedSplit(arr, manifest.labels, manifest)


def dataset_stats(root):
    return read_stats(Path(root) / "stats.json")


# ---------------------------------------------------------------- evaluation


def evaluate(model, images, labels, batch_size=64):
    """Eval-mode pass: returns ``(ConfusionMatrix, metrics dict)``."""
    if len(labels) == 0:
        raise ValueError("evaluate: empty dataset")
    preds = model.predict(images, batch_size)
    cm = ConfusionMatrix(model.variant.num_classes)
    cm.update_batch(labels, preds)
    return cm, summary(cm)


# ---------------------------------------------------------------- checkpoints


def _rng_state(rng):
    return rng.bit_generator.state


def save_checkpoint(path, model, opt, epoch, rng_states, run_config):
    """Write ``<path>.ntc`` (tensors) and ``<path>.json`` (metadata)."""
    path = Path(path)
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"velocity/{k}": v for k, v in opt.velocity.items()})
    serialization.save(path.with_suffix(".ntc"), tensors)
    meta = {
        "epoch": epoch,
        "rng_state": rng_states,
        "config": run_config,
        "config_hash": config_hash(run_config),
        "optimizer": {"learning_rate": opt.learning_rate, "momentum": opt.momentum,
                      "weight_decay": opt.weight_decay},
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Returns ``(model, OptimizerState, metadata)``."""
    path = Path(path)
    ntc, side = path.with_suffix(".ntc"), path.with_suffix(".json")
    for p in (ntc, side):
        if not p.exists():
            raise FileNotFoundError(f"checkpoint file missing: {p}")
    meta = json.loads(side.read_text())
    if config_hash(meta["config"]) != meta["config_hash"]:
        raise ValueError(f"{side}: config hash does not match stored config")
    tensors = serialization.load(ntc)
    variant = ModelVariant.from_dict(meta["config"]["model"])
    model = build_variant(variant, meta["config"]["train"]["seed"])
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    opt = OptimizerState(**meta["optimizer"])
    opt.velocity = {k[len("velocity/"):]: v for k, v in tensors.items() if k.startswith("velocity/")}
    return model, opt, meta


# ---------------------------------------------------------------- training


def _write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])


def read_log(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]


@dataclass
class TrainResult:
    model: object
    optimizer: OptimizerState
    log: list
    confusion: ConfusionMatrix
    metrics: dict
    diagnostics: list
    run_config: dict


def run_config_dict(variant, train_cfg, data_dir, image_size):
    return {"model": variant.to_dict(), "train": asdict(train_cfg),
            "data": str(data_dir), "image_size": image_size}


def train(variant, data_dir, train_cfg, out_dir=None, train_split=None, val_split=None):
    """Train ``variant`` on the dataset in ``data_dir``.

    Already-loaded splits can be passed to skip disk reads.  When
    ``out_dir`` is given the log, checkpoints, metrics and confusion CSVs
    are written there.
    """
    image_size = variant.backbone.input_size_for()
    stats = dataset_stats(data_dir)
    fill = -stats.pixel_mean / stats.pixel_std  # black after standardization
    if train_split is None:
        train_split = load_dataset(data_dir, "train", stats, image_size)
    if val_split is None:
        val_split = load_dataset(data_dir, "val", stats, image_size)
    model = build_variant(variant, train_cfg.seed)
    params = dict(model.named_parameters())
    opt = OptimizerState(train_cfg.learning_rate, train_cfg.momentum, train_cfg.weight_decay)
    loss_fn = get_loss(variant.loss)
    sampler_seed = substream_seed(train_cfg.seed, "sampler")
    sampler = weighted_sampler(train_split.manifest, sampler_seed)
    aug_rng = substream(train_cfg.seed, "augment")
    run_cfg = run_config_dict(variant, train_cfg, data_dir, image_size)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(run_cfg, indent=2, sort_keys=True) + "\n")

    n = len(train_split.labels)
    steps = math.ceil(n / train_cfg.batch_size)
    rows, diag_rows = [], []
    cm, metrics = None, None
    for epoch in range(1, train_cfg.epochs + 1):
        diagnostics.reset()
        losses = []
        for step in range(steps):
            idx = [next(sampler) for _ in range(train_cfg.batch_size)]
            batch = train_split.images[idx]
            if train_cfg.augment:
                batch = np.stack([augment(img.transpose(1, 2, 0), aug_rng, fill).transpose(2, 0, 1)
                                  for img in batch])
            labels = train_split.labels[idx]
            model.zero_grad()
            with Tape() as tape:
                loss = loss_fn(model(Tensor(batch), training=True), labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {step}")
            tape.backward(loss)
            sgd_step(params, opt)
            losses.append(value)
        cm, metrics = evaluate(model, val_split.images, val_split.labels)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_aca": metrics["aca"],
               "val_macro_f1": metrics["macro_f1"], "val_micro_f1": metrics["micro_f1"]}
        rows.append(row)
        diag_rows.append({"epoch": epoch, **diagnostics.snapshot()})
        log.info("epoch %d loss %.5f aca %.4f", epoch, row["train_loss"], row["val_aca"])
        if out is not None:
            _write_log(out / "log.csv", rows)
            every = train_cfg.checkpoint_every
            if every and epoch % every == 0:
                (out / "checkpoints").mkdir(exist_ok=True)
                save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}", model, opt, epoch,
                                {"augment": _rng_state(aug_rng)}, run_cfg)
    if cm is None:
        cm, metrics = evaluate(model, val_split.images, val_split.labels)
    if out is not None:
        _write_log(out / "log.csv", rows)
        save_checkpoint(out / "checkpoint", model, opt, train_cfg.epochs,
                        {"augment": _rng_state(aug_rng)}, run_cfg)
        write_metrics_json(cm, out / "metrics.json")
        write_confusion_csv(cm, out / "confusion.csv")
        write_confusion_csv(cm, out / "confusion_normalized.csv", normalized=True)
        (out / "diagnostics.json").write_text(json.dumps(diag_rows, indent=2, sort_keys=True) + "\n")
    return TrainResult(model, opt, rows, cm, metrics, diag_rows, run_cfg)


# ---------------------------------------------------------------- loss comparison


def smoothed(values, window=3):
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def epochs_to_threshold(rows, threshold):
    for row in rows:
        if row["val_aca"] >= threshold:
            return row["epoch"]
    return None


def convergence_compare(variant, data_dir, train_cfg, out_dir=None, arms=("grading", "cross_entropy"),
                        threshold=0.6):
    """Train one arm per loss kind from identical initialisation and compare."""
    stats = dataset_stats(data_dir)
    image_size = variant.backbone.input_size_for()
    train_split = load_dataset(data_dir, "train", stats, image_size)
    val_split = load_dataset(data_dir, "val", stats, image_size)
    curves, results = {}, {}
    for i, loss in enumerate(arms):
        arm_variant = ModelVariant.from_dict({**variant.to_dict(), "loss": loss})
        arm_dir = None if out_dir is None else Path(out_dir) / f"arm{i}_{loss}"
        res = train(arm_variant, data_dir, train_cfg, arm_dir, train_split, val_split)
        curves[f"arm{i}"] = res.log
        results[f"arm{i}"] = {"loss": loss, "epochs_to_threshold": epochs_to_threshold(res.log, threshold),
                              "final_aca": res.log[-1]["val_aca"] if res.log else None,
                              "smoothed_loss_monotone": bool(np.all(np.diff(smoothed(
                                  [r["train_loss"] for r in res.log])) <= 0))}
    a, b = results["arm0"], results["arm1"]
    ea, eb = a["epochs_to_threshold"], b["epochs_to_threshold"]
    if ea is None and eb is None:
        finding = f"neither arm reached ACA {threshold}"
    elif eb is None or (ea is not None and ea < eb):
        finding = f"{a['loss']} reached ACA {threshold} first"
    elif ea is None or eb < ea:
        finding = f"{b['loss']} reached ACA {threshold} first"
    else:
        finding = f"both arms reached ACA {threshold} at epoch {ea}"
    loss_diff = max((abs(ra["train_loss"] - rb["train_loss"])
                     for ra, rb in zip(curves["arm0"], curves["arm1"])), default=0.0)
    report = {"threshold": threshold, "arms": results, "finding": finding,
              "max_train_loss_difference": loss_diff, "epochs": train_cfg.epochs}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "curves.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("arm", "loss") + LOG_FIELDS)
            for arm, rows in curves.items():
                for row in rows:
                    writer.writerow([arm, results[arm]["loss"], row["epoch"]]
                                    + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report, curves
