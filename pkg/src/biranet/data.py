"""Synthetic ordinal fundus-like images and the preprocessing chain.

Images are H×W×3 float arrays in [0, 1] unless stated otherwise.  The
preprocessing order is crop → resize → histogram equalization →
standardization; augmentation runs afterwards, on training batches only.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import diagnostics

CROP_THRESHOLD = 10 / 255
NUM_GRADES = 5
DEFAULT_BLOB_RANGES = {0: (0, 0), 1: (3, 4), 2: (7, 8), 3: (11, 12), 4: (15, 17)}


# ---------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    records: list
    image_size: tuple
    split: str = "train"
    root: Path | None = None
    num_classes: int = NUM_GRADES

    def __post_init__(self):
        self.records = [(str(p), int(y)) for p, y in self.records]
        self.image_size = tuple(self.image_size)
        paths = [p for p, _ in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest paths must be unique")
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be train or val, got {self.split!r}")
        for _, y in self.records:
            if not 0 <= y < self.num_classes:
                raise ValueError(f"label {y} outside [0, {self.num_classes - 1}]")

    @property
    def labels(self):
        return np.array([y for _, y in self.records], dtype=np.int64)

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def __len__(self):
        return len(self.records)

    def path(self, i):
        rel = self.records[i][0]
        return self.root / rel if self.root is not None else Path(rel)


def write_manifest(manifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(manifest.records)


def read_manifest(path, split=None, image_size=None):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label"]:
            raise ValueError(f"{path}: expected header 'path,label', got {header}")
        records = [(row[0], int(row[1])) for row in reader if row]
    split = split or path.stem
    if image_size is None:
        meta = path.parent / "generator.json"
        size = json.loads(meta.read_text())["image_size"] if meta.exists() else 0
        image_size = (size, size)
    return DatasetManifest(records, image_size, split, root=path.parent)


def load_split(root, split):
    path = Path(root) / f"{split}.csv"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return read_manifest(path, split)


# ---------------------------------------------------------------- generation


@dataclass
class GeneratorConfig:
    seed: int = 0
    per_class_count: int = 10
    val_per_class: int = 0
    image_size: int = 64
    blob_ranges: dict = field(default_factory=lambda: dict(DEFAULT_BLOB_RANGES))
    noise: float = 0.02

    def __post_init__(self):
        self.blob_ranges = {int(k): tuple(v) for k, v in self.blob_ranges.items()}
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")
        if self.val_per_class < 0:
            raise ValueError("val_per_class must be >= 0")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if sorted(self.blob_ranges) != list(range(NUM_GRADES)):
            raise ValueError("blob_ranges needs one (lo, hi) entry per grade 0..4")
        prev_hi = -1
        for g in range(NUM_GRADES):
            lo, hi = self.blob_ranges[g]
            if lo > hi or lo <= prev_hi:
                raise ValueError("blob ranges must be ordered and strictly increasing with grade")
            prev_hi = hi

    @property
    def blob_radius(self):
        return max(1.5, self.image_size / 32)


@dataclass
class RenderInfo:
    center: tuple
    radius: float
    blobs: list

    @property
    def bounds(self):
        """(top, bottom, left, right) of the disc, inclusive pixel indices."""
        cy, cx = self.center
        r = self.radius
        return (math.ceil(cy - r), math.floor(cy + r), math.ceil(cx - r), math.floor(cx + r))


def render_image(rng, grade, config):
    """Bright disc on black with a grade-dependent number of dark lesion blobs."""
    size = config.image_size
    lo, hi = config.blob_ranges[grade]
    radius = size * rng.uniform(0.36, 0.42)
    margin = size / 2 - radius - 1
    cy = size / 2 - 0.5 + rng.uniform(-margin, margin) * 0.5
    cx = size / 2 - 0.5 + rng.uniform(-margin, margin) * 0.5
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dist = np.hypot(yy - cy, xx - cx)
    disc = dist <= radius
    shade = 1.0 - 0.3 * (dist / radius) ** 2
    base = np.array([0.85, 0.45, 0.25]) * rng.uniform(0.9, 1.1)
    img = np.where(disc[..., None], shade[..., None] * base, 0.0)

    n_blobs = int(rng.integers(lo, hi + 1))
    blob_r = config.blob_radius
    min_gap = 2 * blob_r + 2
    blobs = []
    attempts = 0
    while len(blobs) < n_blobs:
        attempts += 1
        if attempts > 10000:
            raise RuntimeError("could not place non-overlapping lesions; lower blob_ranges")
        rho = radius * 0.85 * math.sqrt(rng.random())
        phi = 2 * math.pi * rng.random()
        by, bx = cy + rho * math.sin(phi), cx + rho * math.cos(phi)
        if all(math.hypot(by - y, bx - x) >= min_gap for y, x in blobs):
            blobs.append((by, bx))
    lesion = np.array([0.3, 0.05, 0.04])
    for by, bx in blobs:
        mask = np.hypot(yy - by, xx - bx) <= blob_r
        img[mask] = lesion

    noise = rng.normal(0.0, config.noise, size=img.shape)
    img = np.where(disc[..., None], np.clip(img + noise, 0.0, 1.0), 0.0)
    return img, RenderInfo((cy, cx), radius, blobs)


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)


def save_image(path, image):
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


def load_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def generate_synthetic(out_dir, config):
    """Write train (and optional val) images, manifests, stats and config.

    Returns ``{split: DatasetManifest}``.
    """
    out = Path(out_dir)
    seq = np.random.SeedSequence(config.seed)
    split_counts = {"train": config.per_class_count, "val": config.val_per_class}
    manifests = {}
    for split, child in zip(("train", "val"), seq.spawn(2)):
        count = split_counts[split]
        if count == 0:
            continue
        rng = np.random.default_rng(child)
        (out / split).mkdir(parents=True, exist_ok=True)
        records = []
        for grade in range(NUM_GRADES):
            for k in range(count):
                img, _ = render_image(rng, grade, config)
                rel = f"{split}/g{grade}_{k:05d}.png"
                try:
                    save_image(out / rel, img)
                except OSError as exc:
                    raise OSError(f"failed to write {out / rel}: {exc}") from exc
                records.append((rel, grade))
        manifest = DatasetManifest(records, (config.image_size, config.image_size), split, root=out)
        write_manifest(manifest, out / f"{split}.csv")
        manifests[split] = manifest
    meta = asdict(config)
    meta["blob_ranges"] = {str(k): list(v) for k, v in config.blob_ranges.items()}
    (out / "generator.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    train_imgs = [preprocess(load_image(manifests["train"].path(i)), config.image_size)
                  for i in range(len(manifests["train"]))]
    write_stats(compute_stats(train_imgs), out / "stats.json")
    return manifests


# ---------------------------------------------------------------- preprocessing


def luminance(image):
    return image @ np.array([0.299, 0.587, 0.114])


def crop_black_border(image, threshold=CROP_THRESHOLD):
    """Tightest box around pixels brighter than ``threshold``, padded to a square.

    A fully black image is returned unchanged and counted in diagnostics.
    """
    bright = luminance(image) > threshold
    if not bright.any():
        diagnostics.record("crop_all_black")
        return image
    rows = np.flatnonzero(bright.any(axis=1))
    cols = np.flatnonzero(bright.any(axis=0))
    crop = image[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    h, w = crop.shape[:2]
    side = max(h, w)
    if h == w:
        return crop
    out = np.zeros((side, side, image.shape[2]), dtype=image.dtype)
    top, left = (side - h) // 2, (side - w) // 2
    out[top:top + h, left:left + w] = crop
    return out


def _bilinear_sample(image, ys, xs, fill=None):
    """Sample ``image`` at fractional coordinates; outside points get ``fill``."""
    h, w = image.shape[:2]
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    out = np.zeros(ys.shape + image.shape[2:])
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yi = np.clip(y0 + dy, 0, h - 1)
            xi = np.clip(x0 + dx, 0, w - 1)
            wgt = wy * wx
            out += image[yi, xi] * (wgt[..., None] if image.ndim == 3 else wgt)
    if fill is not None:
        outside = (ys < 0) | (ys > h - 1) | (xs < 0) | (xs > w - 1)
        out[outside] = fill
    return out


def resize_bilinear(image, target):
    """Bilinear resize, corner-aligned: output corners sample input corners exactly."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError("target size must be at least 1x1")
    h, w = image.shape[:2]
    if (h, w) == (th, tw):
        return image.copy()
    ys = np.linspace(0, h - 1, th) if th > 1 else np.array([(h - 1) / 2])
    xs = np.linspace(0, w - 1, tw) if tw > 1 else np.array([(w - 1) / 2])
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(image, gy, gx)


def histogram_equalization(image, bins=256):
    """Per-channel CDF remapping on ``bins`` levels; output in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    levels = np.clip(np.rint(image * (bins - 1)), 0, bins - 1).astype(int)
    out = np.empty_like(image)
    channels = image.shape[2] if image.ndim == 3 else 1
    for c in range(channels):
        lv = levels[..., c] if image.ndim == 3 else levels
        cdf = np.cumsum(np.bincount(lv.ravel(), minlength=bins)) / lv.size
        if image.ndim == 3:
            out[..., c] = cdf[lv]
        else:
            out[...] = cdf[lv]
    return out


@dataclass
class PreprocessStats:
    pixel_mean: float
    pixel_std: float

    def __post_init__(self):
        if not self.pixel_std > 0:
            raise ValueError("pixel_std must be positive")


def compute_stats(images):
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return PreprocessStats(float(stack.mean()), float(stack.std()))


def write_stats(stats, path):
    Path(path).write_text(json.dumps(asdict(stats), indent=2) + "\n")


def read_stats(path):
    data = json.loads(Path(path).read_text())
    return PreprocessStats(float(data["pixel_mean"]), float(data["pixel_std"]))


def standardize(image, stats):
    return (np.asarray(image) - stats.pixel_mean) / stats.pixel_std


def preprocess(image, size):
    """Crop, resize to ``size``×``size`` and equalize (standardization is separate)."""
    return histogram_equalization(resize_bilinear(crop_black_border(image), (size, size)))


# ---------------------------------------------------------------- sampling and augmentation


def weighted_sampler(manifest, seed, chunk=4096):
    """Endless stream of record indices with equal expected class frequency.

    Validation happens on the call, not on the first draw.
    """
    counts = np.asarray(manifest.class_counts)
    if len(manifest) == 0 or (counts == 0).any():
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"weighted_sampler: classes {empty} have no records")
    labels = manifest.labels
    p = 1.0 / counts[labels]
    p /= p.sum()

    def stream(rng):
        while True:
            yield from rng.choice(len(labels), size=chunk, p=p).tolist()

    return stream(np.random.default_rng(seed))


def rotate(image, degrees, fill=0.0):
    """Rotate about the image centre with bilinear resampling.

    Positive angles turn the picture counter-clockwise as displayed (row 0
    at the top), the same sense as ``np.rot90``.
    """
    h, w = image.shape[:2]
    theta = -math.radians(degrees)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    # inverse map output pixel → source location
    cos, sin = math.cos(theta), math.sin(theta)
    sy = cos * (yy - cy) - sin * (xx - cx) + cy
    sx = sin * (yy - cy) + cos * (xx - cx) + cx
    return _bilinear_sample(image, sy, sx, fill=fill)


def apply_augmentation(image, angle, flip_vertical, flip_horizontal, fill=0.0):
    out = rotate(image, angle, fill) if angle else np.array(image, copy=True)
    if flip_vertical:
        out = out[::-1]
    if flip_horizontal:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(image, rng, fill=0.0, max_degrees=10.0):
    angle = rng.uniform(-max_degrees, max_degrees)
    flip_v = rng.random() < 0.5
    flip_h = rng.random() < 0.5
    return apply_augmentation(image, angle, flip_v, flip_h, fill)
