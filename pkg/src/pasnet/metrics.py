"""Accuracy, rank-based ROC-AUC, macro one-vs-rest AUC and CSV reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

N_CLASSES = 4


class SingleClassError(ValueError):
    """AUC is undefined when only one class is present."""


@dataclass
class PredictionSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.ndim != 2 or self.scores.shape[1] != N_CLASSES:
            raise ValueError(f"scores must be [N,{N_CLASSES}], got {self.scores.shape}")
        if self.labels.shape != (self.scores.shape[0],):
            raise ValueError("labels must have one entry per score row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValueError(f"labels must lie in [0, {N_CLASSES})")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def accuracy(p: PredictionSet) -> float:
    if p.labels.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return float(np.mean(np.argmax(p.scores, axis=1) == p.labels))


def auc_binary(scores, positives) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(p: PredictionSet) -> List[Optional[float]]:
    """One-vs-rest AUC per class; ``None`` for classes absent from the labels."""
    present = np.unique(p.labels)
    if present.size < 2:
        raise SingleClassError("macro AUC needs at least two distinct labels")
    out = []
    for c in range(N_CLASSES):
        out.append(auc_binary(p.scores[:, c], p.labels == c) if c in present else None)
    return out


def macro_auc_ovr(p: PredictionSet) -> float:
    aucs = [a for a in per_class_auc(p) if a is not None]
    return float(np.mean(aucs))


def dice(pred: np.ndarray, target: np.ndarray) -> float:
    """Dice overlap of two binary arrays; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    denom = pred.sum() + target.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, target).sum() / denom)


# ---------------------------------------------------------------------------
# reports


@dataclass
class FoldResult:
    fold: int
    auc: float
    accuracy: float
    class_auc: List[Optional[float]]
    failed: bool = False


@dataclass
class MetricsReport:
    folds: List[FoldResult] = field(default_factory=list)

    @property
    def completed(self) -> List[FoldResult]:
        return [f for f in self.folds if not f.failed]

    @property
    def warning(self) -> bool:
        """True when at least one fold aborted and the means exclude it."""
        return any(f.failed for f in self.folds)

    @property
    def mean_auc(self) -> float:
        done = self.completed
        return float(np.mean([f.auc for f in done])) if done else float("nan")

    @property
    def mean_accuracy(self) -> float:
        done = self.completed
        return float(np.mean([f.accuracy for f in done])) if done else float("nan")

    def mean_class_auc(self) -> List[Optional[float]]:
        out = []
        for c in range(N_CLASSES):
            vals = [f.class_auc[c] for f in self.completed if f.class_auc[c] is not None]
            out.append(float(np.mean(vals)) if vals else None)
        return out

    def write_csv(self, path) -> None:
        """Columns fold, auc, accuracy; one row per fold plus a ``mean`` row."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "auc", "accuracy"])
            for f in self.folds:
                if f.failed:
                    w.writerow([f.fold, "failed", "failed"])
                else:
                    w.writerow([f.fold, repr(f.auc), repr(f.accuracy)])
            w.writerow(["mean", repr(self.mean_auc), repr(self.mean_accuracy)])

    def write_class_csv(self, path, class_names: Sequence[str]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", *class_names])
            rows = [(f.fold, f.class_auc) for f in self.completed] + [("mean", self.mean_class_auc())]
            for fold, vals in rows:
                w.writerow([fold, *("" if v is None else repr(v) for v in vals)])

    def to_dict(self) -> dict:
        return {
            "folds": [f.__dict__ for f in self.folds],
            "mean_auc": self.mean_auc,
            "mean_accuracy": self.mean_accuracy,
            "warning": self.warning,
        }


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
