"""Confusion matrix, macro/weighted F1 and balanced recall."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def confusion_matrix(preds, labels, num_classes):
    """Entry (i, j) counts samples of true class i predicted as j."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds has shape {preds.shape} but labels has {labels.shape}")
    for name, arr in (("preds", preds), ("labels", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contain values outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _per_class(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return tp, fp, fn


def per_class_f1(cm):
    tp, fp, fn = _per_class(cm)
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def f1_macro(cm):
    """Unweighted mean of one-vs-rest F1; an absent, never-predicted class scores 0."""
    return float(per_class_f1(cm).mean())


def f1_weighted(cm):
    support = np.asarray(cm).sum(axis=1)
    if support.sum() == 0:
        return 0.0
    return float((per_class_f1(cm) * support).sum() / support.sum())


def balanced_recall(cm, return_excluded=False):
    """Mean per-class recall over classes with at least one true sample."""
    tp, _, fn = _per_class(cm)
    support = tp + fn
    present = support > 0
    excluded = [int(i) for i in np.flatnonzero(~present)]
    value = float((tp[present] / support[present]).mean()) if present.any() else 0.0
    if return_excluded:
        return value, excluded
    return value


@dataclass
class MetricsReport:
    confusion: list
    f1_macro: float
    balanced_recall: float
    per_class: list = field(default_factory=list)
    f1_weighted: float | None = None
    excluded_classes: list = field(default_factory=list)

    @classmethod
    def from_predictions(cls, preds, labels, num_classes, class_names=None):
        cm = confusion_matrix(preds, labels, num_classes)
        tp, fp, fn = _per_class(cm)
        f1 = per_class_f1(cm)
        recall, excluded = balanced_recall(cm, return_excluded=True)
        names = class_names or [str(k) for k in range(num_classes)]
        per_class = []
        for k in range(num_classes):
            prec_d, rec_d = tp[k] + fp[k], tp[k] + fn[k]
            per_class.append({
                "class": names[k],
                "precision": float(tp[k] / prec_d) if prec_d else 0.0,
                "recall": float(tp[k] / rec_d) if rec_d else 0.0,
                "f1": float(f1[k]),
                "support": int(rec_d),
            })
        return cls(cm.tolist(), f1_macro(cm), recall, per_class, f1_weighted(cm), excluded)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return Path(path)

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))
