"""
Micro-averaged grading metrics.

Every class is binarized one-vs-rest and the binary counts are pooled before
computing sensitivity, specificity, F-score and accuracy. For single-label
problems this makes SN = FS = top-1 accuracy, SP = (C - 2 + SN) / (C - 1) and
ACC = (C - 2 + 2 SN) / C; see METRICS_MICRO_AVERAGING.md for the derivation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import auc, confusion_matrix, roc_curve
from sklearn.preprocessing import label_binarize

from constants import N_CLASSES
from error_responses import (
    EmptyInputError,
    EmptyMatrixError,
    InvalidScoresError,
    LengthMismatchError,
    ShapeMismatchError,
    SingleClassDegenerateError,
)

METRIC_NAMES = ("sn", "sp", "fs", "acc", "auc")

# Tolerance on the row sums of score vectors
SIMPLEX_ATOL = 1e-6


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = true class and columns = predicted class."""
    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> List[List[int]]:
        return self.counts.astype(int).tolist()


@dataclass(frozen=True)
class MicroMetrics:
    sn: float
    sp: float
    fs: float
    acc: float


@dataclass(frozen=True)
class MetricReport:
    sn: float
    sp: float
    fs: float
    acc: float
    auc: Optional[float]
    n_samples: int
    diagnostic: bool = False

    @property
    def top1_accuracy(self) -> float:
        """Micro sensitivity equals plain top-1 accuracy for single-label data."""
        return self.sn

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sn": self.sn,
            "sp": self.sp,
            "fs": self.fs,
            "acc": self.acc,
            "auc": self.auc,
            "n_samples": self.n_samples,
            "diagnostic": self.diagnostic,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricReport":
        return cls(
            sn=float(data["sn"]),
            sp=float(data["sp"]),
            fs=float(data["fs"]),
            acc=float(data["acc"]),
            auc=None if data.get("auc") is None else float(data["auc"]),
            n_samples=int(data["n_samples"]),
            diagnostic=bool(data.get("diagnostic", False)),
        )


@dataclass(frozen=True)
class CrossValSummary:
    """Mean and population standard deviation per metric, with the fold values."""
    mean: Dict[str, float]
    std: Dict[str, float]
    folds: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(next(iter(self.folds.values()), []))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": dict(self.mean),
            "std": dict(self.std),
            "folds": {name: list(values) for name, values in self.folds.items()},
        }


def confusion(predictions: Sequence[int], truths: Sequence[int], n_classes: int = N_CLASSES) -> ConfusionMatrix:
    """
    Count (truth, prediction) pairs.

    Raises:
        LengthMismatchError: If the sequences differ in length
        EmptyInputError: If they are empty
    """
    if len(predictions) != len(truths):
        raise LengthMismatchError(
            f"{len(predictions)} predictions versus {len(truths)} truths",
            details={"predictions": len(predictions), "truths": len(truths)},
        )
    if len(predictions) == 0:
        raise EmptyInputError("Nothing to score")
    counts = confusion_matrix(
        [int(t) for t in truths], [int(p) for p in predictions], labels=list(range(n_classes))
    )
    return ConfusionMatrix(counts.astype(np.int64))


def pooled_counts(cm: ConfusionMatrix) -> Tuple[int, int, int, int]:
    """One-vs-rest (TP, FP, FN, TN) summed over classes."""
    counts = cm.counts
    total = counts.sum()
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = total - tp - fp - fn
    return int(tp.sum()), int(fp.sum()), int(fn.sum()), int(tn.sum())


def micro_metrics(cm: ConfusionMatrix) -> MicroMetrics:
    """
    Micro-averaged SN, SP, FS and ACC.

    Raises:
        EmptyMatrixError: If the matrix total is zero
    """
    if cm.total == 0:
        raise EmptyMatrixError("Confusion matrix is empty")
    tp, fp, fn, tn = pooled_counts(cm)
    sn = tp / (tp + fn)
    sp = tn / (tn + fp)
    precision = tp / (tp + fp)
    fs = 0.0 if precision + sn == 0 else 2.0 * precision * sn / (precision + sn)
    acc = (tp + tn) / (tp + tn + fp + fn)
    return MicroMetrics(sn=float(sn), sp=float(sp), fs=float(fs), acc=float(acc))


def roc_auc_micro(scores: Sequence[Sequence[float]], truths: Sequence[int], n_classes: int = N_CLASSES) -> float:
    """
    Area under the ROC curve of the pooled one-vs-rest label/score pairs.

    Every distinct score is a threshold; the curve is integrated with the
    trapezoidal rule.

    Raises:
        LengthMismatchError: If scores and truths differ in length
        EmptyInputError: If there is nothing to score
        ShapeMismatchError: If scores are not an (n, n_classes) matrix
        InvalidScoresError: If a score row is negative or does not sum to 1
        SingleClassDegenerateError: If the pooled binary labels hold one value
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(truths):
        raise LengthMismatchError(
            f"{len(scores)} score vectors versus {len(truths)} truths",
            details={"scores": len(scores), "truths": len(truths)},
        )
    if len(scores) == 0:
        raise EmptyInputError("Nothing to score")
    if scores.ndim != 2 or scores.shape[1] != n_classes:
        raise ShapeMismatchError(
            f"Scores must have shape (n, {n_classes}), got {scores.shape}",
            details={"shape": list(scores.shape)},
        )
    row_sums = scores.sum(axis=1)
    off_simplex = np.flatnonzero((scores < 0).any(axis=1) | (np.abs(row_sums - 1.0) > SIMPLEX_ATOL))
    if off_simplex.size:
        raise InvalidScoresError(
            f"{off_simplex.size} score rows are not probability vectors",
            details={"rows": off_simplex[:10].tolist(), "row_sums": row_sums[off_simplex[:10]].tolist()},
        )

    binary = label_binarize([int(t) for t in truths], classes=list(range(n_classes))).ravel()
    pooled = scores.ravel()
    if binary.min() == binary.max():
        raise SingleClassDegenerateError("Pooled binary labels hold a single class")

    fpr, tpr, _ = roc_curve(binary, pooled, drop_intermediate=False)
    return float(auc(fpr, tpr))


def metric_report(predictions: Sequence[int], truths: Sequence[int],
                  scores: Optional[Sequence[Sequence[float]]] = None, diagnostic: bool = False) -> MetricReport:
    """All five metrics; AUC is left out when no scores are given."""
    micro = micro_metrics(confusion(predictions, truths))
    area = roc_auc_micro(scores, truths) if scores is not None else None
    return MetricReport(
        sn=micro.sn, sp=micro.sp, fs=micro.fs, acc=micro.acc, auc=area,
        n_samples=len(truths), diagnostic=diagnostic,
    )


def report_from_probabilities(probabilities: np.ndarray, truths: Sequence[int], diagnostic: bool = False) -> MetricReport:
    """Score argmax predictions (ties toward the lower class) with the probabilities as AUC scores."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    predictions = probabilities.argmax(axis=1) if len(probabilities) else np.zeros(0, dtype=int)
    return metric_report(predictions.tolist(), truths, probabilities, diagnostic=diagnostic)


def cross_val_aggregate(reports: Sequence[MetricReport]) -> CrossValSummary:
    """
    Mean and population standard deviation (divide by k) of each metric.

    AUC is aggregated only when every report carries it.

    Raises:
        EmptyInputError: If no reports are given
    """
    if not reports:
        raise EmptyInputError("No reports to aggregate")
    mean: Dict[str, float] = {}
    std: Dict[str, float] = {}
    folds: Dict[str, List[float]] = {}
    for name in METRIC_NAMES:
        values = [getattr(report, name) for report in reports]
        if any(value is None for value in values):
            continue
        array = np.asarray(values, dtype=np.float64)
        folds[name] = array.tolist()
        mean[name] = float(array.mean())
        std[name] = float(array.std(ddof=0))
    return CrossValSummary(mean=mean, std=std, folds=folds)
