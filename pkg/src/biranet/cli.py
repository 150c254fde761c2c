"""Command-line entry point: ``biranet {gen-data,train,eval,gradcheck,compare-loss}``.

Every command accepts ``--config run.json``.  Keys in that file use the
option names below with dashes turned into underscores; flags given on the
command line win over file keys, and unknown keys are rejected.  The merged
configuration is written to ``run_config.json`` in each output directory so
``--config <dir>/run_config.json`` repeats the run exactly.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checks import SCOPES, TOLERANCE, format_report, run_scope
from .data import GeneratorConfig, generate_synthetic
from .errors import BiraError, ConfigError
from .loss import LOSS_KINDS
from .metrics import summary, write_confusion_csv, write_metrics_json
from .model import VARIANTS, ModelVariant, config_hash
from .training import (TrainConfig, convergence_compare, dataset_stats, evaluate, load_checkpoint,
                       load_dataset, train)

log = logging.getLogger("biranet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_NAME = "run_config.json"

# Documented defaults per command.  ``None`` marks a key that must be given.
_MODEL_DEFAULTS = {
    "variant": "bira_net",
    "loss": "grading",
    "inverted": False,
    "image_size": 64,
    "maps_per_class": 4,
}
_TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    **_MODEL_DEFAULTS,
    "epochs": 30,
    "batch_size": 16,
    "lr": 0.01,
    "momentum": 0.9,
    "weight_decay": 5e-7,
    "seed": 0,
    "augment": True,
    "checkpoint_every": 0,
}
DEFAULTS = {
    "gen-data": {"out": None, "seed": 0, "per_class": 50, "val_per_class": 10, "size": 64},
    "train": dict(_TRAIN_DEFAULTS),
    "eval": {"checkpoint": None, "data": None, "split": "val", "out": None, "force": False,
             "variant": None, "loss": None, "inverted": None, "image_size": None,
             "maps_per_class": None},
    "gradcheck": {"scope": "all", "seed": 0, "seeds": None},
    "compare-loss": {**_TRAIN_DEFAULTS, "threshold": 0.6},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _non_negative_float(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _bool_flag(p, name, help_text):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=argparse.SUPPRESS, help=help_text)


def _model_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--variant", choices=VARIANTS, default=S, help="model variant (bira_net)")
    p.add_argument("--loss", choices=LOSS_KINDS, default=S, help="loss kind (grading)")
    _bool_flag(p, "inverted", "attention ratio GAP(A*F)/GAP(A) instead of GAP(A)/GAP(A*F)")
    p.add_argument("--image-size", type=_positive, default=S, help="network input side (64)")
    p.add_argument("--maps-per-class", type=_positive, default=S, help="feature maps per class (4)")


def _train_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--data", default=S, help="dataset directory from gen-data (required)")
    p.add_argument("--out", default=S, help="run directory (required)")
    _model_flags(p)
    p.add_argument("--epochs", type=_non_negative, default=S, help="(30)")
    p.add_argument("--batch-size", type=_positive, default=S, help="(16)")
    p.add_argument("--lr", type=_non_negative_float, default=S, help="learning rate (0.01)")
    p.add_argument("--momentum", type=_non_negative_float, default=S, help="(0.9)")
    p.add_argument("--weight-decay", type=_non_negative_float, default=S, help="(5e-7)")
    p.add_argument("--seed", type=int, default=S, help="seed for init, sampler and augmentation (0)")
    _bool_flag(p, "augment", "random rotation and flips during training (on)")
    p.add_argument("--checkpoint-every", type=_non_negative, default=S,
                   help="also checkpoint every N epochs; 0 keeps only the final one (0)")


def build_parser():
    S = argparse.SUPPRESS
    parser = _Parser(prog="biranet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON file with default keys for this command")
        return p

    p = command("gen-data", "render a synthetic graded dataset")
    p.add_argument("--out", default=S, help="output directory (required)")
    p.add_argument("--seed", type=int, default=S, help="(0)")
    p.add_argument("--per-class", type=_positive, default=S, help="training images per grade (50)")
    p.add_argument("--val-per-class", type=_non_negative, default=S, help="validation images per grade (10)")
    p.add_argument("--size", type=_positive, default=S, help="image side in pixels (64)")

    _train_flags(command("train", "train one model variant"))

    p = command("eval", "evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", default=S, help="run directory or checkpoint path (required)")
    p.add_argument("--data", default=S, help="dataset directory (required)")
    p.add_argument("--split", default=S, help="manifest to evaluate (val)")
    p.add_argument("--out", default=S, help="output directory (<run>/eval_<split>)")
    p.add_argument("--force", action="store_true", default=S,
                   help="evaluate even if the model flags disagree with the checkpoint")
    _model_flags(p)

    p = command("gradcheck", "finite-difference gradient checks")
    p.add_argument("--scope", choices=SCOPES + ("all",), default=S, help="(all)")
    p.add_argument("--seed", type=int, default=S, help="base seed (0)")
    p.add_argument("--seeds", type=_positive, default=S,
                   help="random points per check (20)")

    p = command("compare-loss", "grading loss vs cross-entropy from identical initialisation")
    _train_flags(p)
    p.add_argument("--threshold", type=float, default=S, help="ACA level for epochs-to-threshold (0.6)")
    return parser


def resolve_config(command, args):
    """Defaults, then ``--config`` keys, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: top level must be a JSON object")
        if loaded.pop("command", command) != command:
            raise UsageError(f"{path} was written for a different command")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"{path}: unknown keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in cfg:
            cfg[key] = value
    missing = [k for k, v in cfg.items() if v is None and k in _REQUIRED.get(command, ())]
    if missing:
        raise UsageError(f"{command}: missing required keys: {', '.join(missing)}")
    return cfg


_REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "compare-loss": ("data", "out"),
    "eval": ("checkpoint", "data"),
}


def echo_config(out_dir, command, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def _variant(cfg):
    for key, allowed in (("variant", VARIANTS), ("loss", LOSS_KINDS)):
        if cfg[key] not in allowed:
            raise UsageError(f"{key} must be one of {allowed}, got {cfg[key]!r}")
    return ModelVariant.build(cfg["variant"], cfg["loss"], image_size=cfg["image_size"],
                              maps_per_class=cfg["maps_per_class"], inverted=bool(cfg["inverted"]))


def _train_config(cfg):
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["lr"],
                       momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], seed=cfg["seed"],
                       augment=bool(cfg["augment"]), checkpoint_every=cfg["checkpoint_every"])


def _check_dataset(data_dir):
    root = Path(data_dir)
    for name in ("train.csv", "val.csv", "stats.json"):
        if not (root / name).exists():
            raise FileNotFoundError(f"missing dataset file: {root / name}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg):
    for key in ("per_class", "size"):
        if int(cfg[key]) < 1:
            raise UsageError(f"{key} must be >= 1")
    gen = GeneratorConfig(seed=cfg["seed"], per_class_count=cfg["per_class"],
                          val_per_class=cfg["val_per_class"], image_size=cfg["size"])
    manifests = generate_synthetic(cfg["out"], gen)
    echo_config(cfg["out"], "gen-data", cfg)
    for split, m in manifests.items():
        print(f"{split}: {len(m)} images, per-grade counts {list(m.class_counts)}")
    print(f"written to {cfg['out']}")
    return EXIT_OK


def cmd_train(cfg):
    _check_dataset(cfg["data"])
    variant = _variant(cfg)
    echo_config(cfg["out"], "train", cfg)
    result = train(variant, cfg["data"], _train_config(cfg), cfg["out"])
    print(json.dumps(result.metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _checkpoint_path(path):
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint"
    return p.with_suffix("") if p.suffix in (".ntc", ".json") else p


def _expected_model(cfg, stored):
    """Model config implied by the eval flags, or None when no model flag was given."""
    keys = ("variant", "loss", "inverted", "image_size", "maps_per_class")
    if all(cfg[k] is None for k in keys):
        return None
    bb = stored["backbone"]
    merged = {
        "variant": stored["kind"], "loss": stored["loss"],
        "inverted": bool(stored["attention"]["inverted"]) if stored.get("attention") else False,
        "image_size": ModelVariant.from_dict(stored).backbone.input_size_for(),
        "maps_per_class": bb["out_channels"] // bb["num_classes"],
    }
    merged.update({k: cfg[k] for k in keys if cfg[k] is not None})
    if merged["variant"] not in VARIANTS or merged["loss"] not in LOSS_KINDS:
        raise UsageError(f"invalid variant/loss {merged['variant']!r}/{merged['loss']!r}")
    return ModelVariant.build(merged["variant"], merged["loss"], image_size=merged["image_size"],
                              maps_per_class=merged["maps_per_class"],
                              num_classes=bb["num_classes"], stage_widths=tuple(bb["stage_widths"]),
                              blocks_per_stage=tuple(bb["blocks_per_stage"]),
                              out_spatial=bb["out_spatial"][0], inverted=merged["inverted"],
                              use_batchnorm=bb["use_batchnorm"]).to_dict()


def cmd_eval(cfg):
    ckpt = _checkpoint_path(cfg["checkpoint"])
    model, _, meta = load_checkpoint(ckpt)
    stored = meta["config"]["model"]
    expected = _expected_model(cfg, stored)
    if expected is not None and config_hash(expected) != config_hash(stored):
        if not cfg["force"]:
            raise UsageError(f"model flags do not match checkpoint {ckpt} "
                             f"(hash {config_hash(expected)[:12]} vs {config_hash(stored)[:12]}); "
                             "pass --force to evaluate anyway")
        log.warning("model flags differ from the checkpoint; evaluating the checkpoint as stored")
    data = Path(cfg["data"])
    if not (data / "stats.json").exists():
        raise FileNotFoundError(f"missing dataset file: {data / 'stats.json'}")
    split = load_dataset(data, cfg["split"], dataset_stats(data), model.variant.backbone.input_size_for())
    cm, metrics = evaluate(model, split.images, split.labels)
    out = Path(cfg["out"]) if cfg["out"] else ckpt.parent / f"eval_{cfg['split']}"
    echo_config(out, "eval", cfg)
    write_metrics_json(cm, out / "metrics.json")
    write_confusion_csv(cm, out / "confusion.csv")
    write_confusion_csv(cm, out / "confusion_normalized.csv", normalized=True)
    print(json.dumps(summary(cm), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(cfg):
    if cfg["scope"] not in SCOPES + ("all",):
        raise UsageError(f"scope must be one of {SCOPES + ('all',)}")
    scopes = SCOPES if cfg["scope"] == "all" else (cfg["scope"],)
    results = [r for s in scopes for r in run_scope(s, seeds=cfg["seeds"], base_seed=cfg["seed"])]
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) above {TOLERANCE:g}: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"all {len(results)} checks below {TOLERANCE:g}")
    return EXIT_OK


def cmd_compare_loss(cfg):
    _check_dataset(cfg["data"])
    variant = _variant(cfg)
    echo_config(cfg["out"], "compare-loss", cfg)
    report, _ = convergence_compare(variant, cfg["data"], _train_config(cfg), cfg["out"],
                                    threshold=cfg["threshold"])
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "compare-loss": cmd_compare_loss}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"biranet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BiraError, OSError, ValueError, KeyError) as exc:
        print(f"biranet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        log.exception("unexpected failure in %s", args.command)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
