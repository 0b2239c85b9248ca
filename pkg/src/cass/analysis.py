"""Attention rollout maps, first-layer feature grids and timing reports."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .models import KindError, attention_weights, feature_map


@dataclass
class AttentionMap:
    grid: np.ndarray
    patch_grid: np.ndarray
    upsample: int = 1
    provenance: dict = field(default_factory=dict)


def minmax_normalize(values):
    """Scale to [0, 1]; a constant array maps to ``x / max`` (ones) or to zeros if it is all zero."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo > 1e-12:
        return (values - lo) / (hi - lo)
    if hi > 0:
        return values / hi
    return np.zeros_like(values)


def _grid_shape(n, grid_shape):
    if grid_shape is not None:
        return tuple(grid_shape)
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


def rollout_matrix(per_layer):
    """B×T×T product of head-averaged, identity-augmented, row-normalized attention."""
    joint = None
    for i, a in enumerate(per_layer):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 4 or a.shape[-1] != a.shape[-2]:
            raise ValueError(f"layer {i}: expected B×heads×T×T attention, got shape {a.shape}")
        rows = a.sum(axis=-1)
        if np.max(np.abs(rows - 1.0)) > 1e-4:
            raise ValueError(f"layer {i}: attention rows are not stochastic (max deviation {np.max(np.abs(rows - 1)):.2e})")
        m = a.mean(axis=1) + np.eye(a.shape[-1])
        m /= m.sum(axis=-1, keepdims=True)
        joint = m if joint is None else m @ joint
    if joint is None:
        raise ValueError("attention_rollout needs at least one layer")
    return joint


def attention_rollout(per_layer, upsample=1, grid_shape=None, provenance=None) -> AttentionMap:
    """Class-token rollout restricted to patch tokens, normalized to [0, 1].

    With several samples in the batch, each sample's map is normalized and
    the maps are averaged, then renormalized.
    """
    joint = rollout_matrix(per_layer)
    cls_rows = joint[:, 0, 1:]
    shape = _grid_shape(cls_rows.shape[1], grid_shape)
    maps = [minmax_normalize(row.reshape(shape)) for row in cls_rows]
    patch = minmax_normalize(np.mean(maps, axis=0)) if len(maps) > 1 else maps[0]
    grid = np.kron(patch, np.ones((upsample, upsample))) if upsample > 1 else patch.copy()
    return AttentionMap(grid, patch, upsample, dict(provenance or {}, layers=len(per_layer), samples=len(maps)))


def average_attention_map(arm, samples, batch_size=32, model_id="") -> AttentionMap:
    """Mean of the per-sample rollout maps of ``samples`` (already transformed), renormalized."""
    if arm.kind != "transformer":
        raise KindError("average_attention_map needs a transformer arm")
    samples = np.asarray(samples, dtype=arm._dtype())
    if len(samples) == 0:
        raise ValueError("need at least one sample")
    patch_maps = []
    for start in range(0, len(samples), batch_size):
        layers = attention_weights(arm, samples[start : start + batch_size])
        for b in range(len(layers[0])):
            patch_maps.append(attention_rollout([layer[b : b + 1] for layer in layers]).patch_grid)
    patch = minmax_normalize(np.mean(patch_maps, axis=0))
    up = arm.spec.patch_size
    return AttentionMap(
        np.kron(patch, np.ones((up, up))),
        patch,
        up,
        {"model": model_id, "samples": len(patch_maps), "layers": arm.spec.num_blocks},
    )


def connectedness(grid, threshold=0.5):
    """Area fraction of the largest 4-connected component above ``threshold``."""
    labels, count = ndimage.label(np.asarray(grid) > threshold)
    if count == 0:
        return 0.0
    sizes = np.bincount(labels.ravel())[1:]
    return float(sizes.max() / labels.size)


def tile_grid(tiles, pad=1):
    """Arrange F×H×W tiles row-major into one image with ``pad``-pixel gaps."""
    f, h, w = tiles.shape
    cols = math.ceil(math.sqrt(f))
    rows = math.ceil(f / cols)
    out = np.zeros((rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad))
    for k in range(f):
        r, c = divmod(k, cols)
        out[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = tiles[k]
    return out


def first_layer_features(arm, image, path=None):
    """Stem-conv activations of one image, each filter min-max normalized.

    Returns ``(raw, normalized)`` arrays of shape F×H×W and writes a tiled
    grayscale PNG (plus JSON sidecar) when ``path`` is given.
    """
    if arm.kind != "cnn":
        raise KindError("first_layer_features needs a cnn arm")
    image = np.asarray(image, dtype=arm._dtype())
    raw = feature_map(arm, image[None], "first_conv")[0].astype(np.float64)
    normalized = np.stack([minmax_normalize(t) for t in raw])
    if path is not None:
        save_png(tile_grid(normalized), path, value_range=(float(raw.min()), float(raw.max())),
                 extra={"tiles": int(raw.shape[0]), "tile_shape": list(raw.shape[1:])})
    return raw, normalized


def save_png(values, path, value_range=None, extra=None):
    """8-bit grayscale PNG of values in [0, 1] with a JSON sidecar of the raw range."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path)
    lo, hi = value_range if value_range is not None else (float(np.min(values)), float(np.max(values)))
    meta = {"min": lo, "max": hi, "shape": list(pixels.shape)}
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im)


@dataclass
class TimingReport:
    epoch_seconds: list
    augment_calls_per_epoch: list
    arms_per_pass: int = 2
    train_size: int | None = None
    single_cnn_epoch_seconds: float | None = None
    single_transformer_epoch_seconds: float | None = None
    dual_view_augment_calls_per_epoch: list | None = None
    ratio: float | None = None
    ratio_available: bool = False

    @property
    def cass_epoch_seconds(self):
        return statistics.median(self.epoch_seconds) if self.epoch_seconds else None

    def to_dict(self):
        d = asdict(self)
        d["cass_epoch_seconds"] = self.cass_epoch_seconds
        return d

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return Path(path)


def _median_seconds(trace):
    return statistics.median(r["seconds"] for r in trace) if trace else None


def timing_report(trace, cnn_trace=None, transformer_trace=None, dual_view_trace=None, train_size=None) -> TimingReport:
    """Aggregate a CASS trace; with both single-arm reference traces, add the time ratio.

    The ratio is median joint epoch time over the sum of the two single-arm
    median epoch times.
    """
    if not trace:
        raise ValueError("timing_report needs a non-empty pretraining trace")
    report = TimingReport(
        epoch_seconds=[r["seconds"] for r in trace],
        augment_calls_per_epoch=[int(r["augment_calls"]) for r in trace],
        train_size=train_size,
        single_cnn_epoch_seconds=_median_seconds(cnn_trace),
        single_transformer_epoch_seconds=_median_seconds(transformer_trace),
        dual_view_augment_calls_per_epoch=[int(r["augment_calls"]) for r in dual_view_trace] if dual_view_trace else None,
    )
    if cnn_trace and transformer_trace:
        report.ratio = report.cass_epoch_seconds / (report.single_cnn_epoch_seconds + report.single_transformer_epoch_seconds)
        report.ratio_available = True
    return report


def measure_timing(cfg, data, epochs=3):
    """Run joint, single-arm and dual-view loops on identical data and report timings."""
    import dataclasses

    from .pretrain import run_pretrain

    cfg = dataclasses.replace(cfg, epochs=epochs, swa_enabled=False)
    joint = run_pretrain(cfg, data).trace
    single_a = run_pretrain(cfg, data, single_arm="a").trace
    single_b = run_pretrain(cfg, data, single_arm="b").trace
    dual = run_pretrain(cfg, data, dual_view=True).trace
    cnn, vit = (single_a, single_b) if cfg.arm_a.kind == "cnn" else (single_b, single_a)
    train_size = len(data.indices("train")) if hasattr(data, "indices") else len(data)
    return timing_report(joint, cnn, vit, dual, train_size)
