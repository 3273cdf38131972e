"""Stratified folds and classification metrics for the three-class problem."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .dataio import CLASSES
from .exceptions import InsufficientDataError, StratificationError
from .numcore import as_rng

METRIC_NAMES = ("accuracy", "f1", "precision", "recall", "auroc")


@dataclass(frozen=True)
class FoldSplit:
    k: int
    seed: int
    folds: tuple  # fold index per sample

    def validation_indices(self, f: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.folds) == f)

    def train_indices(self, f: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.folds) != f)

    def __iter__(self):
        for f in range(self.k):
            yield self.train_indices(f), self.validation_indices(f)


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> FoldSplit:
    """Assign each sample a fold: seeded global shuffle, then per-class round-robin.

    The shuffle does not look at labels, so relabeling the classes leaves the
    assignment unchanged.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise StratificationError("k must be >= 2")
    present = [c for c in CLASSES if np.any(labels == c)]
    for c in present:
        count = int(np.sum(labels == c))
        if count < k:
            raise StratificationError(f"class {c} has {count} samples, fewer than k={k} folds")
    order = as_rng(seed).permutation(labels.size)
    folds = np.full(labels.size, -1, dtype=np.int64)
    for c in present:
        members = order[labels[order] == c]
        folds[members] = np.arange(members.size) % k
    if np.any(folds < 0):
        raise StratificationError("labels outside {1,2,3} cannot be stratified")
    return FoldSplit(k, seed, tuple(folds.tolist()))


def confusion_matrix(truth, pred) -> np.ndarray:
    """3x3 counts, rows = true class, columns = predicted class."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((3, 3), dtype=np.int64)
    np.add.at(cm, (truth - 1, pred - 1), 1)
    return cm


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise InsufficientDataError("empty confusion matrix")
    return float(np.trace(cm) / total)


def per_class_prf(cm) -> tuple:
    """Per-class precision, recall and F1, with every 0/0 defined as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.sum() == 0:
        raise InsufficientDataError("empty confusion matrix")
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1


def macro_prf(cm) -> tuple:
    """(macro precision, macro recall, macro F1); flags 0/0 cases with a warning."""
    cm = np.asarray(cm)
    p, r, f = per_class_prf(cm)
    if np.any(cm.sum(axis=0) == 0) or np.any(cm.sum(axis=1) == 0):
        warnings.warn("precision or recall is 0/0 for some class; counted as 0", RuntimeWarning, stacklevel=2)
    return float(p.mean()), float(r.mean()), float(f.mean())


def binary_auroc(scores, positive) -> float:
    """Mann-Whitney statistic with midranks; NaN when one side is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_ovr(probs, truth) -> float:
    """Macro one-vs-rest AUROC over the classes whose problem is defined.

    Returns NaN (the undefined marker) when no class has both positives and
    negatives, e.g. single-class truth.
    """
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth)
    vals = [binary_auroc(probs[:, c - 1], truth == c) for c in CLASSES]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def fold_metrics(truth, probs) -> dict:
    truth = np.asarray(truth, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    pred = np.argmax(probs, axis=1) + 1
    cm = confusion_matrix(truth, pred)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        p, r, f = macro_prf(cm)
    pc, rc, fc = per_class_prf(cm)
    return {
        "accuracy": accuracy(cm),
        "f1": f,
        "precision": p,
        "recall": r,
        "auroc": auroc_ovr(probs, truth),
        "per_class": {
            "precision": pc.tolist(),
            "recall": rc.tolist(),
            "f1": fc.tolist(),
        },
        "confusion_matrix": cm.tolist(),
    }


def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


@dataclass
class MetricsReport:
    """Cross-validated metrics: per-fold values plus mean and std (population)."""

    model: str
    setting: str
    folds: list = field(default_factory=list)
    averaging: str = "macro"
    extra: dict = field(default_factory=dict)

    def values(self, name: str) -> np.ndarray:
        return np.array([f[name] for f in self.folds], dtype=np.float64)

    def mean(self, name: str) -> float:
        v = self.values(name)
        if np.all(np.isnan(v)):
            return float("nan")
        return float(np.nanmean(v))

    def std(self, name: str) -> float:
        v = self.values(name)
        if np.all(np.isnan(v)):
            return float("nan")
        return float(np.nanstd(v))

    @property
    def accuracy(self) -> float:
        return self.mean("accuracy")

    @property
    def confusion_matrix(self) -> np.ndarray:
        return np.sum([np.array(f["confusion_matrix"]) for f in self.folds], axis=0)

    def to_dict(self) -> dict:
        out = {"model": self.model, "setting": self.setting, "averaging": self.averaging}
        for name in METRIC_NAMES:
            out[name] = _clean(self.mean(name))
            out[f"{name}_std"] = _clean(self.std(name))
        out["confusion_matrix"] = self.confusion_matrix.tolist() if self.folds else None
        out["per_fold"] = {name: [_clean(float(v)) for v in self.values(name)] for name in METRIC_NAMES}
        out["folds"] = [
            {"per_class": f["per_class"], "confusion_matrix": f["confusion_matrix"]} for f in self.folds
        ]
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# JSON schema of MetricsReport.to_dict(); documented in the README.
METRICS_SCHEMA = {
    "type": "object",
    "required": ["model", "setting", "averaging", *METRIC_NAMES, "per_fold", "confusion_matrix"],
    "properties": {
        "model": {"type": "string"},
        "setting": {"type": "string"},
        "averaging": {"enum": ["macro"]},
        **{name: {"type": ["number", "null"], "minimum": 0, "maximum": 1} for name in METRIC_NAMES},
        **{f"{name}_std": {"type": ["number", "null"], "minimum": 0} for name in METRIC_NAMES},
        "per_fold": {
            "type": "object",
            "required": list(METRIC_NAMES),
            "additionalProperties": {"type": "array", "items": {"type": ["number", "null"]}},
        },
        "confusion_matrix": {
            "type": "array",
            "minItems": 3,
            "maxItems": 3,
            "items": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "integer", "minimum": 0}},
        },
    },
}
