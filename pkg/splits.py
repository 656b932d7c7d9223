"""
Patient-level partitioning.

Source patients are dealt into k cross-validation folds; target patients are
split into a pseudo-label pool and a held-out test set. Every split is a pure
function of (patients, seed) and serializes to JSON for replay.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Tuple, Union

import numpy as np

from constants import DEFAULT_CV_FOLDS, TARGET_POOL_FRACTION
from dataset import Dataset, Domain
from error_responses import (
    BadFoldIndexError,
    DomainMismatchError,
    EmptySideError,
    InsufficientPatientsError,
    InvalidConfigError,
    InvalidFractionError,
    IoFailureError,
)
from structured_logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class SplitPlan:
    """k disjoint patient folds covering every source patient."""
    folds: Tuple[FrozenSet[str], ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def patients(self) -> FrozenSet[str]:
        return frozenset().union(*self.folds)

    def to_dict(self) -> Dict[str, Any]:
        return {"folds": [sorted(fold) for fold in self.folds], "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitPlan":
        folds = tuple(frozenset(fold) for fold in data["folds"])
        seen: set = set()
        for fold in folds:
            if seen & fold:
                raise InvalidConfigError("Split plan folds overlap", details={"patients": sorted(seen & fold)})
            seen |= fold
        return cls(folds=folds, seed=int(data["seed"]))

    def save(self, path: Union[str, Path]) -> Path:
        return _write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TargetSplit:
    """Disjoint pseudo-label pool and test patients of the target domain."""
    pseudo_pool_patients: FrozenSet[str]
    test_patients: FrozenSet[str]
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pseudo_pool_patients": sorted(self.pseudo_pool_patients),
            "test_patients": sorted(self.test_patients),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TargetSplit":
        pool = frozenset(data["pseudo_pool_patients"])
        test = frozenset(data["test_patients"])
        if pool & test:
            raise InvalidConfigError("Target split sides overlap", details={"patients": sorted(pool & test)})
        return cls(pseudo_pool_patients=pool, test_patients=test, seed=int(data["seed"]))

    def save(self, path: Union[str, Path]) -> Path:
        return _write_json(Path(path), self.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TargetSplit":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"Failed to write {path}: {exc}", details={"path": str(path)}) from exc
    return path


def _shuffled_patients(dataset: Dataset, seed: int) -> List[str]:
    # Sorting first makes the result independent of manifest row order
    patients = sorted(dataset.patient_ids)
    order = np.random.default_rng(seed).permutation(len(patients))
    return [patients[i] for i in order]


def make_cv_folds(dataset: Dataset, k: int = DEFAULT_CV_FOLDS, seed: int = 0) -> SplitPlan:
    """
    Shuffle patients with a seeded generator and deal them round-robin into k folds.

    Raises:
        InvalidConfigError: If k < 2
        InsufficientPatientsError: If there are fewer patients than folds
    """
    if k < 2:
        raise InvalidConfigError(f"Cross-validation needs k >= 2, got {k}", details={"k": k})
    if dataset.n_patients < k:
        raise InsufficientPatientsError(
            f"{dataset.n_patients} patients cannot fill {k} folds",
            details={"n_patients": dataset.n_patients, "k": k},
        )

    shuffled = _shuffled_patients(dataset, seed)
    plan = SplitPlan(folds=tuple(frozenset(shuffled[i::k]) for i in range(k)), seed=seed)
    logger.debug("Cross-validation folds built", k=k, seed=seed, fold_sizes=[len(f) for f in plan.folds])
    return plan


def split_target(dataset: Dataset, fraction: float = TARGET_POOL_FRACTION, seed: int = 0) -> TargetSplit:
    """
    Split target patients into a pseudo-label pool and a test set.

    The pool takes the first ceil(fraction * n) shuffled patients.

    Raises:
        DomainMismatchError: If the dataset is not the target domain
        InvalidFractionError: If fraction is outside (0, 1)
        EmptySideError: If either side would hold no patients
    """
    if dataset.domain != Domain.TARGET:
        raise DomainMismatchError(
            f"split_target expects the target domain, got {dataset.domain.value}",
            details={"domain": dataset.domain.value},
        )
    if not 0.0 < fraction < 1.0:
        raise InvalidFractionError(f"Fraction {fraction} is outside (0, 1)", details={"fraction": fraction})

    shuffled = _shuffled_patients(dataset, seed)
    # Rounding guards against 2/3 * 71 landing a hair above an integer
    n_pool = math.ceil(round(fraction * len(shuffled), 9))
    pool, test = shuffled[:n_pool], shuffled[n_pool:]
    if not pool or not test:
        raise EmptySideError(
            f"Split of {len(shuffled)} patients at {fraction} leaves a side empty",
            details={"n_patients": len(shuffled), "n_pool": len(pool), "n_test": len(test)},
        )
    return TargetSplit(pseudo_pool_patients=frozenset(pool), test_patients=frozenset(test), seed=seed)


def materialize(dataset: Dataset, plan: SplitPlan, val_fold: int) -> Tuple[Dataset, Dataset]:
    """
    Samples of fold ``val_fold`` versus all remaining samples.

    Raises:
        BadFoldIndexError: If val_fold is outside [0, k)
    """
    if not 0 <= val_fold < plan.k:
        raise BadFoldIndexError(f"Fold {val_fold} is outside [0, {plan.k})", details={"val_fold": val_fold, "k": plan.k})
    val_patients = plan.folds[val_fold]
    train_patients = [p for p in dataset.patient_ids if p not in val_patients]
    return dataset.subset_by_patients(train_patients), dataset.subset_by_patients(val_patients)


def materialize_target(dataset: Dataset, split: TargetSplit) -> Tuple[Dataset, Dataset]:
    """(pseudo pool, test) datasets of a target split."""
    return dataset.subset_by_patients(split.pseudo_pool_patients), dataset.subset_by_patients(split.test_patients)
