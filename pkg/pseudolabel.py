"""
Pseudo-labeling of the target pool and construction of augmented training sets.

Prediction runs on frozen parameters; the union of labeled source samples and
pseudo-labeled pool samples keeps a provenance flag per sample so that source
supervision can be proven unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from architecture import ArchitectureGraph
from constants import DEFAULT_EVAL_BATCH_SIZE, PSEUDO_LABEL_HEADER
from dataset import BScan, Dataset, GradeLabel
from error_responses import (
    CoverageMismatchError,
    DuplicateImageIdError,
    EmptyPoolError,
    InvalidConfigError,
    IoFailureError,
    ManifestFormatError,
    MissingTruthError,
)
from label_guard import evaluation_scope
from metrics import MetricReport, report_from_probabilities
from model import ModelParameters, predict_proba
from structured_logger import get_logger

logger = get_logger(__name__)


class Provenance(str, Enum):
    SOURCE_GT = "source_gt"
    TARGET_PSEUDO = "target_pseudo"
    TARGET_GT = "target_gt"


@dataclass(frozen=True)
class PseudoLabel:
    image_id: str
    probabilities: Tuple[float, ...]
    hard_label: GradeLabel
    confidence: float


class PseudoLabelSet:
    """Predicted class probabilities per image id, in pool order."""

    def __init__(self, entries: Iterable[PseudoLabel]):
        self._entries: Dict[str, PseudoLabel] = {}
        for entry in entries:
            if entry.image_id in self._entries:
                raise DuplicateImageIdError(f"Duplicate pseudo-label for {entry.image_id!r}", details={"image_id": entry.image_id})
            self._entries[entry.image_id] = entry

    @classmethod
    def from_probabilities(cls, image_ids: Sequence[str], probabilities: np.ndarray) -> "PseudoLabelSet":
        """Hard label = argmax, ties toward the lower class index; confidence = max probability."""
        probabilities = np.asarray(probabilities, dtype=np.float64)
        return cls(
            PseudoLabel(
                image_id=image_id,
                probabilities=tuple(float(p) for p in row),
                hard_label=GradeLabel(int(np.argmax(row))),
                confidence=float(row.max()),
            )
            for image_id, row in zip(image_ids, probabilities)
        )

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[PseudoLabel]:
        return iter(self._entries.values())

    def __getitem__(self, image_id: str) -> PseudoLabel:
        return self._entries[image_id]

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._entries

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PseudoLabelSet):
            return NotImplemented
        return list(self._entries.items()) == list(other._entries.items())

    @property
    def image_ids(self) -> List[str]:
        return list(self._entries)

    def hard_labels(self) -> List[GradeLabel]:
        return [entry.hard_label for entry in self]

    def probability_matrix(self) -> np.ndarray:
        return np.array([entry.probabilities for entry in self], dtype=np.float64)

    def label_counts(self) -> Dict[str, int]:
        counts = {grade.label_name: 0 for grade in GradeLabel}
        for entry in self:
            counts[entry.hard_label.label_name] += 1
        return counts

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Write ``image_id,pseudo_grade,confidence,p_healthy,p_early,p_advanced``."""
        path = Path(path)
        rows = [
            [entry.image_id, int(entry.hard_label), entry.confidence, *entry.probabilities]
            for entry in self
        ]
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(rows, columns=list(PSEUDO_LABEL_HEADER)).to_csv(path, index=False, lineterminator="\n")
        except OSError as exc:
            raise IoFailureError(f"Failed to write {path}: {exc}", details={"path": str(path)}) from exc
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "PseudoLabelSet":
        """
        Read an exported pseudo-label file.

        Raises:
            ManifestFormatError: Wrong header or a hard label that is not the argmax
        """
        frame = pd.read_csv(path, dtype={"image_id": str}, keep_default_na=False)
        if tuple(frame.columns) != PSEUDO_LABEL_HEADER:
            raise ManifestFormatError(
                f"Pseudo-label header must be {','.join(PSEUDO_LABEL_HEADER)}",
                details={"header": list(frame.columns)},
            )
        probabilities = frame[list(PSEUDO_LABEL_HEADER[3:])].to_numpy(dtype=np.float64)
        labels = cls.from_probabilities(frame["image_id"].tolist(), probabilities)
        mismatched = [
            entry.image_id for entry, stored in zip(labels, frame["pseudo_grade"].astype(int))
            if int(entry.hard_label) != stored
        ]
        if mismatched:
            raise ManifestFormatError(
                "Pseudo grades disagree with their probabilities",
                details={"image_ids": mismatched[:10]},
            )
        return labels


def predict_pseudo_labels(params: ModelParameters, graph: ArchitectureGraph, pool: Dataset,
                          batch_size: int = DEFAULT_EVAL_BATCH_SIZE) -> PseudoLabelSet:
    """
    Predict class probabilities for every pool image with frozen parameters.

    Raises:
        EmptyPoolError: If the pool has no samples
    """
    if len(pool) == 0:
        raise EmptyPoolError("Pseudo-label pool is empty")
    labels = PseudoLabelSet.from_probabilities(pool.image_ids, predict_proba(params, graph, pool, batch_size))
    logger.info("Pseudo-labels predicted", n_labels=len(labels), label_counts=labels.label_counts())
    return labels


@dataclass(frozen=True)
class AugmentedSample:
    scan: BScan
    label: GradeLabel
    provenance: Provenance


class AugmentedDataset:
    """Training samples drawn from both domains, each tagged with its label origin."""

    def __init__(self, samples: Iterable[AugmentedSample]):
        self._samples: Tuple[AugmentedSample, ...] = tuple(samples)
        ids = [sample.scan.image_id for sample in self._samples]
        if len(set(ids)) != len(ids):
            raise DuplicateImageIdError("Augmented dataset repeats an image id")

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[AugmentedSample]:
        return iter(self._samples)

    @property
    def image_ids(self) -> List[str]:
        return [sample.scan.image_id for sample in self._samples]

    def pixel_array(self) -> np.ndarray:
        return np.stack([sample.scan.pixels for sample in self._samples])

    def training_labels(self) -> List[GradeLabel]:
        return [sample.label for sample in self._samples]

    def provenance_counts(self) -> Dict[str, int]:
        counts = {provenance.value: 0 for provenance in Provenance}
        for sample in self._samples:
            counts[sample.provenance.value] += 1
        return counts

    def with_provenance(self, provenance: Provenance) -> List[AugmentedSample]:
        return [sample for sample in self._samples if sample.provenance == provenance]

    @classmethod
    def from_pseudo(cls, pool: Dataset, labels: PseudoLabelSet, threshold: float = 0.0) -> "AugmentedDataset":
        """Pool samples carrying pseudo-labels only (no source data)."""
        return cls(_pseudo_samples(pool, labels, threshold))

    @classmethod
    def from_ground_truth(cls, source: Dataset, pool: Dataset) -> "AugmentedDataset":
        """Source plus pool with true target grades, read as oracle supervision."""
        with evaluation_scope("oracle_training"):
            grades = pool.labels()
        missing = [s.image_id for s, grade in zip(pool, grades) if grade is None]
        if missing:
            raise MissingTruthError(f"{len(missing)} pool samples carry no grade", details={"image_ids": missing[:10]})
        pooled = [AugmentedSample(s.scan, grade, Provenance.TARGET_GT) for s, grade in zip(pool, grades)]
        return cls(_source_samples(source) + pooled)


def _source_samples(source: Dataset) -> List[AugmentedSample]:
    return [AugmentedSample(s.scan, label, Provenance.SOURCE_GT) for s, label in zip(source, source.training_labels())]


def _pseudo_samples(pool: Dataset, labels: PseudoLabelSet, threshold: float) -> List[AugmentedSample]:
    if not 0.0 <= threshold <= 1.0:
        raise InvalidConfigError(f"Threshold {threshold} is outside [0, 1]", details={"threshold": threshold})
    if set(labels.image_ids) != set(pool.image_ids):
        raise CoverageMismatchError(
            "Pseudo-labels do not cover the pool exactly",
            details={
                "missing": sorted(set(pool.image_ids) - set(labels.image_ids))[:10],
                "unexpected": sorted(set(labels.image_ids) - set(pool.image_ids))[:10],
            },
        )
    return [
        AugmentedSample(sample.scan, labels[sample.image_id].hard_label, Provenance.TARGET_PSEUDO)
        for sample in pool
        if labels[sample.image_id].confidence >= threshold
    ]


def augment_dataset(source: Dataset, pool: Dataset, labels: PseudoLabelSet, threshold: float = 0.0) -> AugmentedDataset:
    """
    Union of the labeled source set and the pool samples whose pseudo-label
    confidence reaches ``threshold``.

    Raises:
        CoverageMismatchError: If the pseudo-labels do not cover exactly the pool ids
        InvalidConfigError: If threshold is outside [0, 1]
    """
    pseudo = _pseudo_samples(pool, labels, threshold)
    augmented = AugmentedDataset(_source_samples(source) + pseudo)
    logger.info(
        "Augmented training set built",
        n_source=source.n_samples,
        n_pseudo=len(pseudo),
        n_dropped=len(pool) - len(pseudo),
        threshold=threshold,
    )
    return augmented


def pseudo_label_quality(labels: PseudoLabelSet, truth: Dataset) -> MetricReport:
    """
    Score pseudo-labels against ground truth as a diagnostic report.

    Raises:
        MissingTruthError: If a truth sample has no grade
        CoverageMismatchError: If a truth sample has no pseudo-label
    """
    uncovered = [image_id for image_id in truth.image_ids if image_id not in labels]
    if uncovered:
        raise CoverageMismatchError("Pseudo-labels miss truth samples", details={"image_ids": uncovered[:10]})
    with evaluation_scope("pseudo_label_quality"):
        grades = truth.labels()
    missing = [image_id for image_id, grade in zip(truth.image_ids, grades) if grade is None]
    if missing or not grades:
        raise MissingTruthError("Ground truth unavailable for scoring", details={"image_ids": missing[:10]})

    probabilities = np.array([labels[image_id].probabilities for image_id in truth.image_ids])
    return report_from_probabilities(probabilities, [int(g) for g in grades], diagnostic=True)
