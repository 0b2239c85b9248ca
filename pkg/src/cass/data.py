"""Datasets: synthetic pattern families, PNG folder ingestion, stratified splits."""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")


class TestLabelAccessError(PermissionError):
    """Test-split labels were requested before final evaluation."""


class DatasetBundle:
    """Images (N×C×H×W in [0, 1]), integer labels and a per-sample split name.

    Test-split labels are sealed: ``labels_for("test")`` raises unless the
    caller is inside ``with bundle.test_access():``.
    """

    def __init__(self, images, labels, class_names, split=None, paths=None):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_names = list(class_names)
        self.split = None if split is None else np.asarray(split, dtype="<U5")
        self.paths = paths
        self._test_open = False
        self.test_label_reads = 0
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    def indices(self, split):
        if self.split is None:
            raise ValueError("dataset has no split assignment; call split_dataset first")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)

    def images_for(self, split):
        return self.images[self.indices(split)]

    def labels_for(self, split):
        if split == "test":
            if not self._test_open:
                raise TestLabelAccessError("test labels are sealed until final evaluation")
            self.test_label_reads += 1
        return self.labels[self.indices(split)]

    @contextlib.contextmanager
    def test_access(self):
        self._test_open = True
        try:
            yield self
        finally:
            self._test_open = False

    def class_counts(self, split=None):
        if split is None:
            labels = self.labels
        else:
            labels = self.labels[self.indices(split)]
        return np.bincount(labels, minlength=self.num_classes)

    def with_train_subset(self, train_indices) -> DatasetBundle:
        """Copy keeping only ``train_indices`` of the training split; val/test untouched."""
        keep = np.zeros(len(self), dtype=bool)
        keep[np.asarray(train_indices, dtype=np.int64)] = True
        keep |= self.split != "train"
        paths = None if self.paths is None else [p for p, k in zip(self.paths, keep) if k]
        return DatasetBundle(self.images[keep], self.labels[keep], self.class_names, self.split[keep], paths)


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: tuple = (200, 100, 50, 25)
    image_size: int = 32
    noise_level: float = 0.1
    seed: int = 0
    channels: int = 3

    def __post_init__(self):
        self.samples_per_class = tuple(int(n) for n in self.samples_per_class)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.samples_per_class) != self.num_classes:
            raise ValueError(
                f"samples_per_class has {len(self.samples_per_class)} entries for {self.num_classes} classes"
            )
        if min(self.samples_per_class) < 5:
            raise ValueError("every class needs at least 5 samples")

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "samples_per_class": list(self.samples_per_class),
            "image_size": self.image_size,
            "noise_level": self.noise_level,
            "seed": self.seed,
            "channels": self.channels,
        }


FAMILIES = ("stripes", "rings", "blob", "checker")


def _pattern(family, level, size, rng):
    """One grayscale pattern in [0, 1] with per-sample jitter."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    c = (size - 1) / 2.0
    cy = c + rng.uniform(-2.0, 2.0)
    cx = c + rng.uniform(-2.0, 2.0)
    freq = (1.0 + 0.5 * level) * rng.uniform(0.9, 1.1)
    phase = rng.uniform(-math.pi / 4, math.pi / 4)
    if family == "stripes":
        return 0.5 + 0.5 * np.cos(2 * math.pi * freq * 4 * (yy - cy) / size + phase)
    if family == "rings":
        r = np.hypot(yy - cy, xx - cx)
        return 0.5 + 0.5 * np.cos(2 * math.pi * freq * 3 * r / size + phase)
    if family == "blob":
        sigma = size / (5.0 + 2.0 * level) * rng.uniform(0.85, 1.15)
        return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    period = size / (4.0 * freq)
    return ((np.floor((yy - cy) / period) + np.floor((xx - cx) / period)) % 2).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec | None = None) -> DatasetBundle:
    """Class k draws from pattern family ``k mod 4`` at frequency level ``k // 4``."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for k, count in enumerate(spec.samples_per_class):
        family, level = FAMILIES[k % len(FAMILIES)], k // len(FAMILIES)
        for _ in range(count):
            pattern = _pattern(family, level, spec.image_size, rng)
            tint = rng.uniform(0.5, 1.0, size=(spec.channels, 1, 1))
            background = rng.uniform(0.0, 0.2)
            img = background + (0.8 - background) * pattern[None] * tint
            img = img + rng.normal(0.0, spec.noise_level, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(k)
    names = [f"class{k}_{FAMILIES[k % len(FAMILIES)]}" for k in range(spec.num_classes)]
    return DatasetBundle(np.stack(images).astype(np.float32), labels, names)


def split_dataset(data: DatasetBundle, ratios=(0.7, 0.1, 0.2), seed=0) -> DatasetBundle:
    """Stratified shuffled train/val/test assignment with largest-remainder rounding."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    split = np.empty(len(data), dtype="<U5")
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.labels == k)
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            raise ValueError(f"class {data.class_names[k]!r} has {len(idx)} samples; at least 3 are needed")
        idx = rng.permutation(idx)
        counts = _largest_remainder(len(idx), ratios)
        bounds = np.cumsum(counts)[:-1]
        for name, part in zip(SPLITS, np.split(idx, bounds)):
            split[part] = name
    return DatasetBundle(data.images, data.labels, data.class_names, split, data.paths)


def _largest_remainder(n, ratios):
    exact = [n * r for r in ratios]
    counts = [math.floor(e + 1e-9) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def load_folder(root) -> DatasetBundle:
    """Read ``root/<class_name>/*.png``; classes in lexicographic order.

    Images of differing size are resized to the first image's geometry. A
    ``splits.json`` at the root (relative path -> split name) fixes the split.
    """
    from .augment import resize_bilinear

    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"{root}: no class subdirectories")
    images, labels, paths = [], [], []
    for k, d in enumerate(class_dirs):
        files = sorted(d.glob("*.png"))
        if not files:
            raise ValueError(f"{d}: class directory contains no PNG files")
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except Exception as exc:
                raise ValueError(f"{f}: cannot decode image ({exc})") from exc
            arr = arr.transpose(2, 0, 1)
            if images and arr.shape != images[0].shape:
                arr = resize_bilinear(arr, images[0].shape[1])
            images.append(arr)
            labels.append(k)
            paths.append(f.relative_to(root).as_posix())
    bundle = DatasetBundle(np.stack(images), labels, [d.name for d in class_dirs], paths=paths)
    split_file = root / "splits.json"
    if split_file.exists():
        mapping = json.loads(split_file.read_text())
        missing = [p for p in paths if p not in mapping]
        if missing:
            raise ValueError(f"{split_file}: no split for {missing[0]!r}")
        bad = {v for v in mapping.values()} - set(SPLITS)
        if bad:
            raise ValueError(f"{split_file}: unknown split name {sorted(bad)[0]!r}")
        bundle.split = np.array([mapping[p] for p in paths], dtype="<U5")
    return bundle


def save_folder(data: DatasetBundle, root, write_splits=True) -> Path:
    """Write 8-bit RGB PNGs in the ``load_folder`` layout (plus splits.json when split)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    mapping = {}
    counters = {}
    for i, (img, label) in enumerate(zip(data.images, data.labels)):
        name = data.class_names[label]
        n = counters.get(name, 0)
        counters[name] = n + 1
        rel = f"{name}/{n:05d}.png"
        (root / name).mkdir(exist_ok=True)
        arr = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        Image.fromarray(arr, mode="RGB").save(root / rel)
        if data.split is not None:
            mapping[rel] = str(data.split[i])
    if write_splits and data.split is not None:
        (root / "splits.json").write_text(json.dumps(mapping, indent=1, sort_keys=True))
    return root

