"""End-to-end fine-tuning with class-weighted focal loss and early stopping."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .augment import AugmentConfig, Augmenter, eval_batch
from .metrics import MetricsReport
from .models import checkpoint_save
from .optim import Optimizer, cosine_anneal
from .pretrain import DivergenceError

CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")
WEIGHT_MODES = ("inverse_minmax", "minmax", "uniform")
LABEL_FRACTIONS = (0.01, 0.1, 1.0)


@dataclass
class FinetuneConfig:
    init_checkpoint: str | None = None
    label_fraction: float = 1.0
    lr: float = 3e-4
    max_epochs: int = 50
    patience: int = 5
    focal_alpha: float = 1.0
    focal_gamma: float = 2.0
    class_weight_mode: str = "inverse_minmax"
    weight_floor: float = 0.05
    batch_size: int = 4
    t_max: int = 16
    lr_min: float = 1e-6
    augment: bool = True
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment_config, dict):
            self.augment_config = AugmentConfig(**self.augment_config)
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.class_weight_mode not in WEIGHT_MODES:
            raise ValueError(f"class_weight_mode must be one of {WEIGHT_MODES}, got {self.class_weight_mode!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["augment_config"] = self.augment_config.to_dict()
        return d


def class_weights(counts, mode="inverse_minmax", floor=0.05):
    """Focal-loss class weights from per-class sample counts.

    ``minmax`` rescales the counts to [0, 1]; ``inverse_minmax`` does the same
    to ``1 / count`` so rare classes weigh most. Both are floored at ``floor``
    and rescaled to a maximum of 1. A degenerate range gives uniform weights.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ValueError("class_weights needs counts for at least 2 classes")
    if np.any(counts < 1):
        raise ValueError(f"every class count must be >= 1, got {counts.tolist()}")
    if mode not in WEIGHT_MODES:
        raise ValueError(f"unknown class weight mode {mode!r}")
    values = counts if mode == "minmax" else 1.0 / counts
    lo, hi = values.min(), values.max()
    if mode == "uniform" or hi == lo:
        return np.ones_like(counts)
    raw = (values - lo) / (hi - lo)
    floored = np.maximum(raw, floor)
    return floored / floored.max()


def focal_loss(logits, targets, weights, alpha=1.0, gamma=2.0):
    """Batch mean of ``-alpha * w_y * (1 - p_y)**gamma * log p_y`` with ``p = softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    k = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"targets must lie in [0, {k}), got range [{targets.min()}, {targets.max()}]")
    weights = np.asarray(weights, dtype=logits.dtype)
    if weights.shape != (k,):
        raise ValueError(f"expected {k} class weights, got shape {weights.shape}")
    logp = nk.gather_rows(nk.log_softmax(logits, axis=-1), targets)
    per_sample = nk.mul(logp, -alpha * weights[targets])
    if gamma != 0:
        modulator = nk.power(nk.sub(1.0, nk.exp(logp)), gamma)
        per_sample = nk.mul(per_sample, modulator)
    return nk.mean(per_sample)


def label_fraction_subset(data, fraction, seed=0):
    """Stratified ``ceil(fraction * n_c)`` training samples per class (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    train = data.indices("train")
    if len(train) == 0:
        raise ValueError("training split is empty")
    if fraction == 1.0:
        return data.with_train_subset(train)
    rng = np.random.default_rng(seed)
    chosen = []
    labels = data.labels[train]
    for k in range(data.num_classes):
        idx = train[labels == k]
        if len(idx) == 0:
            continue
        take = max(1, math.ceil(fraction * len(idx) - 1e-9))
        chosen.append(rng.permutation(idx)[:take])
    return data.with_train_subset(np.sort(np.concatenate(chosen)))


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a lower validation loss."""

    def __init__(self, patience=5):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch, value):
        """Record one epoch; returns True when it is the new best."""
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


@dataclass
class FinetuneResult:
    arm: object
    report: MetricsReport
    curve: list
    best_epoch: int
    epochs_trained: int
    checkpoint: Path | None = None


def _snapshot(arm):
    return {k: v.copy() for k, v in arm.state_arrays().items()}


def _restore(arm, snap):
    for k, p in arm.params.items():
        p.data = snap[k].copy()
        p.grad = None
    for k in arm.buffers:
        arm.buffers[k][...] = snap[k]


def _seeds(seed):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(3)]


def predict(arm, images, batch_size=64):
    """Eval-mode argmax predictions over already-transformed images."""
    preds = []
    for start in range(0, len(images), batch_size):
        logits = arm.forward(images[start : start + batch_size], "eval").data
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(arm, data, augment_config: AugmentConfig, split="test"):
    """MetricsReport of ``arm`` on ``split`` (opens test-label access for the test split)."""
    images = eval_batch(augment_config, data.images_for(split)).astype(arm._dtype(), copy=False)
    preds = predict(arm, images)
    with data.test_access():
        labels = data.labels_for(split)
    return MetricsReport.from_predictions(preds, labels, data.num_classes, data.class_names)


def run_finetune(cfg: FinetuneConfig, arm, data, out_dir=None, val_loss_fn=None, log=None) -> FinetuneResult:
    """Train every parameter of ``arm`` on the training split of ``data``.

    ``val_loss_fn(arm, epoch)``, when given, replaces the validation-loss
    computation (used to script early-stopping scenarios).
    """
    k = data.num_classes
    if arm.spec.head_dim_out != k:
        raise ValueError(f"arm head width {arm.spec.head_dim_out} does not match {k} classes; call swap_head first")
    train_x = data.images_for("train")
    train_y = data.labels_for("train")
    if len(train_x) == 0:
        raise ValueError("training split is empty")
    counts = np.maximum(np.bincount(train_y, minlength=k), 1)
    weights = class_weights(counts, cfg.class_weight_mode, cfg.weight_floor)
    dtype = arm._dtype()
    shuffle_seed, augment_seed, _ = _seeds(cfg.seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    augmenter = Augmenter(cfg.augment_config, augment_seed)
    val_x = eval_batch(cfg.augment_config, data.images_for("val")).astype(dtype, copy=False)
    val_y = data.labels_for("val")
    plain_train = None if cfg.augment else eval_batch(cfg.augment_config, train_x).astype(dtype, copy=False)

    optimizer = Optimizer(arm.params, "adam")
    stopper = EarlyStopping(cfg.patience)
    best = _snapshot(arm)
    curve = []
    for epoch in range(cfg.max_epochs):
        lr = cosine_anneal(cfg.lr, cfg.lr_min, epoch, cfg.t_max)
        start_time = time.perf_counter()
        order = shuffle_rng.permutation(len(train_x))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = augmenter(train_x[idx]).astype(dtype, copy=False) if cfg.augment else plain_train[idx]
            loss = focal_loss(arm.forward(batch, "train"), train_y[idx], weights, cfg.focal_alpha, cfg.focal_gamma)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite fine-tune loss at epoch {epoch}", epoch)
            nk.backward(loss)
            optimizer.step(lr)
            losses.append(value)
        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(arm, epoch))
        else:
            val_loss = _validation_loss(arm, val_x, val_y, weights, cfg)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val_loss,
            "lr": lr,
            "seconds": time.perf_counter() - start_time,
        }
        curve.append(row)
        if log is not None:
            log(row)
        if stopper.update(epoch, val_loss):
            best = _snapshot(arm)
        if stopper.should_stop:
            break
    _restore(arm, best)
    report = evaluate(arm, data, cfg.augment_config, "test")
    result = FinetuneResult(arm, report, curve, stopper.best_epoch, len(curve))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save(out_dir / "metrics.json")
        write_curve(curve, out_dir / "curve.csv")
        if dtype == np.float32:
            result.checkpoint = checkpoint_save(arm, out_dir / "finetuned.ckpt")
    return result


def _validation_loss(arm, val_x, val_y, weights, cfg, batch_size=64):
    if len(val_x) == 0:
        return 0.0
    total = 0.0
    for start in range(0, len(val_x), batch_size):
        logits = arm.forward(val_x[start : start + batch_size], "eval")
        loss = focal_loss(logits, val_y[start : start + batch_size], weights, cfg.focal_alpha, cfg.focal_gamma)
        total += float(loss.data) * len(logits.data)
    return total / len(val_x)


def write_curve(curve, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in curve:
            writer.writerow({c: row[c] for c in CURVE_COLUMNS})
    return Path(path)
