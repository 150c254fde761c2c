# coding: utf-8
# Generate a small synthetic grading set, train the full model for a few
# epochs and look at the confusion matrix.  Takes about a minute on one core.
# Run with:  python demos/03_train_desk_scale.py [output_dir]

# %%
import sys
import tempfile
from pathlib import Path

from biranet.data import GeneratorConfig, generate_synthetic, load_image
from biranet.model import ModelVariant
from biranet.training import TrainConfig, dataset_stats, evaluate, load_checkpoint, load_dataset, train

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="biranet_demo_"))
print("writing to", out)

# %% [markdown]
# Each synthetic "fundus" is a bright disc with a grade-dependent number of
# dark lesion blobs, so the severity is ordinal by construction.

# %%
manifests = generate_synthetic(out / "data", GeneratorConfig(seed=0, per_class_count=60,
                                                             val_per_class=20, image_size=64))
print("train counts:", manifests["train"].class_counts, " val counts:", manifests["val"].class_counts)
sample = load_image(manifests["train"].path(0))
print("image shape", sample.shape, "range", sample.min(), sample.max())

# %%
variant = ModelVariant.build("bira_net", "grading", image_size=64, maps_per_class=4)
res = train(variant, out / "data", TrainConfig(epochs=12, learning_rate=0.05, seed=0), out / "run")

print("\nepoch  train_loss  val_aca")
for row in res.log:
    print(f"{row['epoch']:>5}  {row['train_loss']:10.4f}  {row['val_aca']:.3f}")

# %% [markdown]
# Rows are true grades, columns predictions.  Off-diagonal mass should sit
# next to the diagonal: the loss penalises far-off grades harder.  With 60
# images per grade and 12 epochs the validation ACA still jumps from epoch to
# epoch; 200 per grade and 30 epochs gets past 0.8.

# %%
print("\nconfusion matrix:\n", res.confusion.counts)
print({k: round(v, 4) for k, v in res.metrics.items() if k != "per_class_f1"})

# %% [markdown]
# The checkpoint alone is enough to rebuild the model and reproduce the
# validation confusion matrix.

# %%
model, _, meta = load_checkpoint(out / "run" / "checkpoint")
stats = dataset_stats(out / "data")
val = load_dataset(out / "data", "val", stats, model.variant.backbone.input_size_for())
cm, _ = evaluate(model, val.images, val.labels)
print("\ncheckpoint from epoch", meta["epoch"], "config hash", meta["config_hash"][:12])
print("reloaded confusion matrix identical:", cm == res.confusion)
