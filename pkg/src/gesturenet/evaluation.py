"""Rotation voting, confusion matrices and person-disjoint cross-validation."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import clone

from .dataset import ANGLES, FoldPlan

VARIANCE_NOTE = ("population variance of the per-class accuracies (percent^2); "
                 "not comparable to published variance columns")


class ConfusionMatrix:
    """Counts indexed by (true gesture, identified gesture)."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("negative counts")
        self.counts = counts.astype(np.int64)

    @classmethod
    def zeros(cls, n_classes=10):
        return cls(np.zeros((n_classes, n_classes), np.int64))

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes=10):
        cm = cls.zeros(n_classes)
        np.add.at(cm.counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cm

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def per_class_accuracy(self):
        rows = self.counts.sum(axis=1)
        if (rows == 0).any():
            raise ValueError(f"classes {np.flatnonzero(rows == 0).tolist()} have no test samples")
        return 100.0 * np.diag(self.counts) / rows

    def percent(self):
        """Row-normalised integer percentages, as printed in gesture tables."""
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.rint(100.0 * self.counts / np.maximum(rows, 1)).astype(int)

    def format(self, title=""):
        pct = self.percent()
        head = "      " + "".join(f"G{j + 1:<4d}" for j in range(self.n_classes))
        lines = [title] if title else []
        lines.append(head)
        for i, row in enumerate(pct):
            cells = "".join(f"{v:<5d}" if v else "     " for v in row)
            lines.append(f"G{i + 1:<4d} {cells}".rstrip())
        return "\n".join(lines)


@dataclass(frozen=True)
class SummaryStats:
    mean_accuracy: float
    min_accuracy: float
    variance: float
    note: str = field(default=VARIANCE_NOTE, compare=False)


def summary_from_accuracies(acc):
    acc = np.asarray(acc, np.float64)
    return SummaryStats(float(acc.mean()), float(acc.min()), float(acc.var()))


def summary_stats(cm):
    return summary_from_accuracies(cm.per_class_accuracy())


# -------------------------------------------------------------------- voting

def vote(probs):
    """Majority class over the rows of ``probs`` (one row per rotation).

    Ties go to the largest summed probability, then the lowest index.
    """
    probs = np.asarray(probs, np.float64)
    votes = np.bincount(np.argmax(probs, axis=1), minlength=probs.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) == 1:
        return int(tied[0])
    mass = probs.sum(axis=0)[tied]
    return int(tied[np.flatnonzero(mass == mass.max())[0]])


def vote_classify(model, rotations):
    """Classify one sample from its 9 rotated masks."""
    rotations = np.asarray(rotations)
    if len(rotations) != len(ANGLES):
        raise ValueError(f"expected {len(ANGLES)} rotated masks, got {len(rotations)}")
    return vote(model.predict_proba(rotations))


def vote_batch(model, masks):
    """Votes for an (n, 9, H, W) array of rotated masks."""
    n, r = masks.shape[:2]
    if r != len(ANGLES):
        raise ValueError(f"expected {len(ANGLES)} rotations per sample, got {r}")
    probs = model.predict_proba(masks.reshape((n * r,) + masks.shape[2:]))
    probs = probs.reshape(n, r, -1)
    return np.array([vote(p) for p in probs], dtype=np.int64), probs


# ---------------------------------------------------------- cross-validation

@dataclass
class FoldResult:
    fold: int
    test_persons: tuple
    matrix: ConfusionMatrix | None
    loss_curve: list
    error: str | None = None


@dataclass
class CVResult:
    folds: list
    n_classes: int

    @property
    def failed(self):
        return [f.fold for f in self.folds if f.error is not None]

    @property
    def merged(self):
        cm = ConfusionMatrix.zeros(self.n_classes)
        for f in self.folds:
            if f.matrix is not None:
                cm = cm + f.matrix
        return cm

    def stats(self):
        return summary_stats(self.merged)


def _run_fold(estimator, masks, labels, persons, plan, fold, n_classes):
    train, test = plan.split(persons, fold)
    n_rot = masks.shape[1]
    X = masks[train].reshape((-1,) + masks.shape[2:])
    y = np.repeat(labels[train], n_rot)
    model = clone(estimator)
    try:
        model.fit(X, y)
    except FloatingPointError as exc:
        return FoldResult(fold, plan.groups[fold], None, [], f"training diverged: {exc}")
    pred, _ = vote_batch(model, masks[test])
    pred = model.classes_[pred]
    cm = ConfusionMatrix.from_predictions(labels[test], pred, n_classes)
    return FoldResult(fold, plan.groups[fold], cm, list(getattr(model, "loss_curve_", [])))


def run_cross_validation(estimator, masks, labels, persons, plan: FoldPlan, n_classes=10, threads=1):
    """Train on all-but-one person group (with rotations), vote on the held-out originals.

    ``masks`` is (n, 9, 50, 50). Folds run in worker processes when
    ``threads > 1``; results do not depend on ``threads``.
    """
    masks, labels, persons = np.asarray(masks), np.asarray(labels), np.asarray(persons)
    args = [(estimator, masks, labels, persons, plan, k, n_classes) for k in range(len(plan.groups))]
    if threads > 1:
        with ProcessPoolExecutor(min(threads, len(args))) as pool:
            folds = list(pool.map(_run_fold, *zip(*args)))
    else:
        folds = [_run_fold(*a) for a in args]
    return CVResult(folds, n_classes)


# -------------------------------------------------------------------- report

def stats_dict(stats):
    return {"mean_accuracy": stats.mean_accuracy, "min_accuracy": stats.min_accuracy,
            "variance": stats.variance, "variance_note": stats.note}


def cv_report(result: CVResult, meta=None):
    """JSON-ready report; the field layout is documented in the README."""
    merged = result.merged
    report = {
        "format": "gesturenet-report/1",
        "meta": dict(meta or {}),
        "folds": [
            {"fold": f.fold, "test_persons": list(f.test_persons),
             "error": f.error, "loss_curve": f.loss_curve,
             "counts": None if f.matrix is None else f.matrix.counts.tolist()}
            for f in result.folds
        ],
        "failed_folds": result.failed,
        "merged": {"counts": merged.counts.tolist(), "percent": merged.percent().tolist()},
    }
    try:
        report["stats"] = stats_dict(summary_stats(merged))
        report["per_class_accuracy"] = merged.per_class_accuracy().tolist()
    except ValueError as exc:
        report["stats"] = None
        report["stats_error"] = str(exc)
    return report


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
