"""
Experiment runner for the self-training comparison.

Modes:
- baseline: 5-fold CV on labeled source data; the best-validation fold model
  is evaluated on the held-out target test split
- proposed: baseline, then pseudo-labels for the target pool from that model,
  and a freshly initialized model trained on source + pseudo-labeled pool
- lower_bound: a fresh model trained on the pseudo-labeled pool only
- upper_bound: a fresh model trained on source + pool with true target grades
- backbone_compare: CV of VGG16, VGG19 and the residual-attention network on
  both backbones, source only

Target grades are read only inside evaluation scopes; every run installs its
own ledger so the number of reads before test evaluation is reported (and
must be zero for baseline, proposed and lower_bound).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from pydantic import BaseModel, Field, ValidationError, model_validator

from architecture import ArchitectureConfig, ArchitectureGraph
from config import settings
from constants import DEFAULT_CV_FOLDS, TARGET_POOL_FRACTION
from dataset import Dataset, Domain, SynthConfig, generate_synthetic, load_manifest
from error_responses import (
    DomainMismatchError,
    EmptyInputError,
    EmptyTrainSetError,
    InvalidConfigError,
    IoFailureError,
    LabelLeakageError,
    MismatchedTestSplitError,
    MissingTruthError,
    UnknownModeError,
)
from label_guard import evaluation_scope, use_ledger
from metrics import METRIC_NAMES, CrossValSummary, MetricReport, cross_val_aggregate
from model import ModelParameters, build_model
from pseudolabel import (
    AugmentedDataset,
    PseudoLabelSet,
    augment_dataset,
    predict_pseudo_labels,
    pseudo_label_quality,
)
from run_manifest import config_hash
from splits import make_cv_folds, materialize, materialize_target, split_target
from structured_logger import clear_run_context, get_logger, performance_logger, set_run_context, set_stage
from train import TrainingConfig, TrainingTrace, evaluate_model, train_model
from weight_bundle import load_pretrained_backbone

logger = get_logger(__name__)

MODES = ("baseline", "proposed", "lower_bound", "upper_bound", "backbone_compare")
COMPARISON_ORDER = ("baseline", "proposed", "lower_bound", "upper_bound")
HYGIENIC_MODES = ("baseline", "proposed", "lower_bound")

# Which data and labels each mode trains with: X_S, X_T, Y_S, Y_T, pseudo Y_T
USAGE_MATRIX = {
    "baseline": (True, False, True, False, False),
    "proposed": (True, True, True, False, True),
    "lower_bound": (False, True, False, False, True),
    "upper_bound": (True, True, True, True, False),
}


class SeedConfig(BaseModel):
    split: int = 0
    init: int = 0
    shuffle: int = 0


class ExperimentConfig(BaseModel):
    """One experiment, loadable from a single JSON file."""
    mode: str = "proposed"
    backbone: str = "vgg19"
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    source_manifest: Optional[str] = None
    target_manifest: Optional[str] = None
    synthetic: Optional[SynthConfig] = None
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    cv_folds: int = Field(default=DEFAULT_CV_FOLDS, ge=2)
    pool_fraction: float = Field(default=TARGET_POOL_FRACTION, gt=0.0, lt=1.0)
    pseudo_label_threshold: float = Field(default=0.0, ge=0.0, le=1.0)
    pretrained_weights: Optional[str] = None
    compare_backbones: Tuple[str, ...] = ("vgg16", "vgg19")

    @model_validator(mode="after")
    def check_data_source(self) -> "ExperimentConfig":
        manifests = (self.source_manifest is not None, self.target_manifest is not None)
        if any(manifests) and not all(manifests):
            raise ValueError("source_manifest and target_manifest must be given together")
        if all(manifests) and self.synthetic is not None:
            raise ValueError("Give either manifests or a synthetic config, not both")
        if not any(manifests) and self.synthetic is None:
            self.synthetic = SynthConfig()
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """
        Raises:
            UnknownModeError: If the mode is not recognized
            InvalidConfigError: If any other field fails validation
        """
        mode = data.get("mode", "proposed")
        if mode not in MODES:
            raise UnknownModeError(f"Unknown mode {mode!r}; expected one of {', '.join(MODES)}", details={"mode": mode})
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise InvalidConfigError(
                "Invalid experiment configuration",
                details={"errors": json.loads(exc.json(include_url=False))},
            ) from exc

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise InvalidConfigError(f"Cannot read experiment config {path}: {exc}", details={"path": str(path)}) from exc
        config = cls.from_dict(data)
        # Manifest paths are relative to the config file
        if config.source_manifest is not None:
            config = config.model_copy(update={
                "source_manifest": str(path.parent / config.source_manifest),
                "target_manifest": str(path.parent / config.target_manifest),
            })
        return config

    def architecture_for(self, kind: str, backbone: Optional[str] = None) -> ArchitectureConfig:
        return self.architecture.model_copy(update={"kind": kind, "backbone": backbone or self.backbone})


@dataclass
class StageOneResult:
    """Cross-validation on the source set, keeping only the best fold's model."""
    fold_reports: List[MetricReport]
    summary: CrossValSummary
    best_fold: int
    graph: ArchitectureGraph
    params: ModelParameters
    val_set: Dataset
    trace: TrainingTrace
    fold_traces: List[TrainingTrace] = field(default_factory=list)


class StageOneCache:
    """Shares stage-1 results between modes that would recompute them identically."""

    def __init__(self) -> None:
        self._results: Dict[str, StageOneResult] = {}

    def __len__(self) -> int:
        return len(self._results)

    def get(self, key: str) -> Optional[StageOneResult]:
        return self._results.get(key)

    def put(self, key: str, result: StageOneResult) -> None:
        self._results[key] = result


@dataclass
class ExperimentResult:
    """Serializable outcome of one experiment; model objects ride along unserialized."""
    mode: str
    backbone: str
    test: Optional[MetricReport]
    test_split_id: str
    config_hash: str
    seeds: Dict[str, int]
    cv: Optional[CrossValSummary] = None
    cv_by_architecture: Dict[str, CrossValSummary] = field(default_factory=dict)
    best_fold: Optional[int] = None
    training_set: Dict[str, int] = field(default_factory=dict)
    pseudo_label_quality: Optional[MetricReport] = None
    target_pseudo_label_quality: Optional[MetricReport] = None
    label_access: Dict[str, Any] = field(default_factory=dict)
    graph: Optional[ArchitectureGraph] = field(default=None, repr=False)
    params: Optional[ModelParameters] = field(default=None, repr=False)
    pseudo_labels: Optional[PseudoLabelSet] = field(default=None, repr=False)
    trace: Optional[TrainingTrace] = field(default=None, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "backbone": self.backbone,
            "test": self.test.to_dict() if self.test else None,
            "test_split_id": self.test_split_id,
            "provenance": {"config_hash": self.config_hash, "seeds": dict(self.seeds)},
            "cv": self.cv.to_dict() if self.cv else None,
            "cv_by_architecture": {name: summary.to_dict() for name, summary in self.cv_by_architecture.items()},
            "best_fold": self.best_fold,
            "training_set": dict(self.training_set),
            "pseudo_label_quality": self.pseudo_label_quality.to_dict() if self.pseudo_label_quality else None,
            "target_pseudo_label_quality": (
                self.target_pseudo_label_quality.to_dict() if self.target_pseudo_label_quality else None
            ),
            "label_access": self.label_access,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_json(), encoding="utf-8")
        except OSError as exc:
            raise IoFailureError(f"Failed to write {path}: {exc}", details={"path": str(path)}) from exc
        return path

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentResult":
        def summary(raw: Optional[Dict[str, Any]]) -> Optional[CrossValSummary]:
            return CrossValSummary(raw["mean"], raw["std"], raw.get("folds", {})) if raw else None

        def report(raw: Optional[Dict[str, Any]]) -> Optional[MetricReport]:
            return MetricReport.from_dict(raw) if raw else None

        return cls(
            mode=data["mode"],
            backbone=data["backbone"],
            test=report(data.get("test")),
            test_split_id=data.get("test_split_id", ""),
            config_hash=data["provenance"]["config_hash"],
            seeds=dict(data["provenance"]["seeds"]),
            cv=summary(data.get("cv")),
            cv_by_architecture={k: summary(v) for k, v in data.get("cv_by_architecture", {}).items()},
            best_fold=data.get("best_fold"),
            training_set=dict(data.get("training_set", {})),
            pseudo_label_quality=report(data.get("pseudo_label_quality")),
            target_pseudo_label_quality=report(data.get("target_pseudo_label_quality")),
            label_access=dict(data.get("label_access", {})),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ============================================================================
# DATA
# ============================================================================

def load_datasets(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """
    (source, target) from manifests or the synthetic generator.

    Raises:
        DomainMismatchError: If a manifest holds the other domain
    """
    if config.synthetic is not None:
        return generate_synthetic(config.synthetic)
    source = load_manifest(config.source_manifest)
    target = load_manifest(config.target_manifest)
    for dataset, expected in ((source, Domain.SOURCE), (target, Domain.TARGET)):
        if dataset.domain != expected:
            raise DomainMismatchError(
                f"Expected a {expected.value} manifest, got {dataset.domain.value}",
                details={"expected": expected.value},
            )
    return source, target


def split_id(dataset: Dataset) -> str:
    """Short digest of the sorted image ids of a split."""
    return hashlib.sha256("\n".join(sorted(dataset.image_ids)).encode("utf-8")).hexdigest()[:16]


def _pretrained(config: ExperimentConfig, backbone: str):
    if config.pretrained_weights is None:
        return None
    return load_pretrained_backbone(config.pretrained_weights, backbone)


# ============================================================================
# STAGES
# ============================================================================

def run_cross_validation(source: Dataset, config: ExperimentConfig, architecture: ArchitectureConfig) -> StageOneResult:
    """
    Train one model per fold and keep the one with the highest validation
    ACC (lowest fold index on ties). Fold f uses init seed ``init + f`` and
    shuffle seed ``shuffle + f``.
    """
    plan = make_cv_folds(source, config.cv_folds, config.seeds.split)
    pretrained = _pretrained(config, architecture.backbone)
    reports: List[MetricReport] = []
    traces: List[TrainingTrace] = []
    best: Optional[Tuple[int, ArchitectureGraph, ModelParameters, Dataset, TrainingTrace]] = None

    for fold in range(plan.k):
        set_stage(f"cv:{architecture.kind}:{architecture.backbone}", fold)
        train_set, val_set = materialize(source, plan, fold)
        graph, params = build_model(architecture, pretrained, seed=config.seeds.init + fold)
        training = config.training.model_copy(update={"shuffle_seed": config.seeds.shuffle + fold})
        trained, trace = train_model(graph, params, train_set, val_set, training)
        report = evaluate_model(trained, graph, val_set, training.eval_batch_size, split="validation")
        reports.append(report)
        traces.append(trace.without_models())
        logger.info("Fold finished", fold=fold, val_acc=report.acc, val_sn=report.sn)
        if best is None or report.acc > reports[best[0]].acc:
            best = (fold, graph, trained, val_set, trace)

    fold, graph, params, val_set, best_trace = best
    return StageOneResult(
        fold_reports=reports,
        summary=cross_val_aggregate(reports),
        best_fold=fold,
        graph=graph,
        params=params,
        val_set=val_set,
        trace=best_trace,
        fold_traces=traces,
    )


def _stage_one_key(config: ExperimentConfig, architecture: ArchitectureConfig) -> str:
    return config_hash({
        "data": {
            "source_manifest": config.source_manifest,
            "synthetic": config.synthetic.model_dump(mode="json") if config.synthetic else None,
        },
        "architecture": architecture.model_dump(mode="json"),
        "training": config.training.model_dump(mode="json"),
        "seeds": config.seeds.model_dump(mode="json"),
        "cv_folds": config.cv_folds,
        "pretrained_weights": config.pretrained_weights,
    })


def _train_fresh(config: ExperimentConfig, architecture: ArchitectureConfig, train_set: AugmentedDataset,
                 val_set: Dataset) -> Tuple[ArchitectureGraph, ModelParameters, TrainingTrace]:
    if len(train_set) == 0:
        raise EmptyTrainSetError("No samples left for the final model")
    graph, params = build_model(architecture, _pretrained(config, architecture.backbone), seed=config.seeds.init)
    training = config.training.model_copy(update={"shuffle_seed": config.seeds.shuffle})
    trained, trace = train_model(graph, params, train_set, val_set, training)
    return graph, trained, trace


def _run_backbone_compare(config: ExperimentConfig, source: Dataset, run_hash: str) -> ExperimentResult:
    summaries: Dict[str, CrossValSummary] = {}
    for kind, label in (("vgg", "{}"), ("ragnet_v2", "RAGNet_v2 ({})")):
        for backbone in config.compare_backbones:
            name = label.format(backbone.upper())
            summaries[name] = run_cross_validation(source, config, config.architecture_for(kind, backbone)).summary
    return ExperimentResult(
        mode=config.mode,
        backbone=config.backbone,
        test=None,
        test_split_id="",
        config_hash=run_hash,
        seeds=config.seeds.model_dump(),
        cv_by_architecture=summaries,
        training_set={"source_gt": source.n_samples},
    )


def _pseudo_label_diagnostics(stage_one: StageOneResult, pool: Dataset, target: Dataset,
                              pseudo_labels: Optional[PseudoLabelSet]) -> Tuple[Optional[MetricReport], Optional[MetricReport]]:
    """Pseudo-label quality on the pool and the whole target set; None where grades are missing."""
    pool_quality = None
    if pseudo_labels is not None and pool.is_fully_labeled:
        pool_quality = pseudo_label_quality(pseudo_labels, pool)
    target_quality = None
    if target.is_fully_labeled:
        target_labels = predict_pseudo_labels(stage_one.params, stage_one.graph, target)
        target_quality = pseudo_label_quality(target_labels, target)
    else:
        logger.info("Target set is partly unlabeled; pseudo-label quality skipped",
                    n_unlabeled=sum(not sample.has_label for sample in target))
    return pool_quality, target_quality


def run_experiment(config: Union[ExperimentConfig, Dict[str, Any]],
                   cache: Optional[StageOneCache] = None) -> ExperimentResult:
    """
    Run one mode end to end and score it on the held-out target test split.

    Pool rows may be unlabeled; the pseudo-label diagnostics are then None.

    Raises:
        UnknownModeError: If the mode is not recognized
        MissingTruthError: If a test sample has no grade (checked before training),
            or upper_bound meets an unlabeled pool sample
        LabelLeakageError: If a hygienic mode read target grades before test evaluation
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    if config.mode not in MODES:
        raise UnknownModeError(f"Unknown mode {config.mode!r}", details={"mode": config.mode})

    torch.set_num_threads(settings.torch_threads)
    run_hash = config_hash(config)
    set_run_context(run_hash[:12], "setup")
    timer = performance_logger.start_timer("run_experiment")
    try:
        with use_ledger() as ledger:
            source, target = load_datasets(config)
            if config.mode == "backbone_compare":
                return _run_backbone_compare(config, source, run_hash)

            split = split_target(target, config.pool_fraction, config.seeds.split)
            pool, test = materialize_target(target, split)
            if not test.is_fully_labeled:
                raise MissingTruthError(
                    "The target test split has samples without a grade",
                    details={"split": "test", "n_unlabeled": sum(not s.has_label for s in test)},
                )
            architecture = config.architecture_for("ragnet_v2")

            key = _stage_one_key(config, architecture)
            stage_one = cache.get(key) if cache is not None else None
            if stage_one is None:
                stage_one = run_cross_validation(source, config, architecture)
                if cache is not None:
                    cache.put(key, stage_one)

            set_stage(f"stage2:{config.mode}")
            pseudo_labels: Optional[PseudoLabelSet] = None
            trace: Optional[TrainingTrace] = None
            if config.mode == "baseline":
                graph, params, trace = stage_one.graph, stage_one.params, stage_one.trace
                training_set = {"source_gt": source.n_samples}
            else:
                if config.mode == "upper_bound":
                    train_set = AugmentedDataset.from_ground_truth(source, pool)
                else:
                    pseudo_labels = predict_pseudo_labels(stage_one.params, stage_one.graph, pool)
                    if config.mode == "proposed":
                        train_set = augment_dataset(source, pool, pseudo_labels, config.pseudo_label_threshold)
                    else:
                        train_set = AugmentedDataset.from_pseudo(pool, pseudo_labels, config.pseudo_label_threshold)
                graph, params, trace = _train_fresh(config, architecture, train_set, stage_one.val_set)
                training_set = train_set.provenance_counts()

            reads_before_test = ledger.total_reads
            if config.mode in HYGIENIC_MODES and reads_before_test:
                raise LabelLeakageError(
                    f"{reads_before_test} target grades were read before test evaluation",
                    details={"by_reason": ledger.reads_by_reason},
                )

            set_stage("test")
            with evaluation_scope("test"):
                test_report = evaluate_model(params, graph, test, config.training.eval_batch_size, split="test")

            pool_quality, target_quality = _pseudo_label_diagnostics(stage_one, pool, target, pseudo_labels)

            result = ExperimentResult(
                mode=config.mode,
                backbone=config.backbone,
                test=test_report,
                test_split_id=split_id(test),
                config_hash=run_hash,
                seeds=config.seeds.model_dump(),
                cv=stage_one.summary,
                best_fold=stage_one.best_fold,
                training_set=training_set,
                pseudo_label_quality=pool_quality,
                target_pseudo_label_quality=target_quality,
                label_access={"before_test": reads_before_test, "by_reason": ledger.reads_by_reason},
                graph=graph,
                params=params,
                pseudo_labels=pseudo_labels,
                trace=trace,
            )
            logger.info("Experiment finished", mode=config.mode, test_acc=test_report.acc, test_sn=test_report.sn)
            return result
    finally:
        performance_logger.end_timer(timer, mode=config.mode)
        clear_run_context()


# ============================================================================
# REPORTING
# ============================================================================

@dataclass(frozen=True)
class ComparisonRow:
    mode: str
    metrics: Dict[str, Optional[float]]
    deltas: Dict[str, Optional[float]]


@dataclass(frozen=True)
class ComparisonReport:
    rows: List[ComparisonRow]
    test_split_id: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "test_split_id": self.test_split_id,
            "rows": [{"mode": r.mode, "metrics": r.metrics, "deltas": r.deltas} for r in self.rows],
        }

    def render(self) -> str:
        """Text table: data/label usage marks, the five metrics and the ACC delta."""
        header = f"{'Method':<12} {'X_S':^4} {'X_T':^4} {'Y_S':^4} {'Y_T':^4} {'~Y_T':^5}" + "".join(
            f" {name.upper():>7}" for name in METRIC_NAMES
        ) + f" {'dACC':>8}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            marks = USAGE_MATRIX.get(row.mode, (False,) * 5)
            cells = "".join(f" {'x' if used else '':^4}" for used in marks[:4]) + f" {'x' if marks[4] else '':^5}"
            values = "".join(
                f" {'-':>7}" if row.metrics.get(name) is None else f" {row.metrics[name]:>7.4f}"
                for name in METRIC_NAMES
            )
            delta = row.deltas.get("acc")
            lines.append(f"{row.mode:<12}{cells}{values} {'-' if delta is None else f'{delta:+.4f}':>8}")
        return "\n".join(lines)


def compare_report(results: Sequence[ExperimentResult]) -> ComparisonReport:
    """
    Order results baseline / proposed / lower_bound / upper_bound and compute
    per-metric deltas against the baseline row (None without a baseline).

    Raises:
        EmptyInputError: Fewer than two results
        InvalidConfigError: A result carries no test report
        MismatchedTestSplitError: Results were scored on different test splits
    """
    if len(results) < 2:
        raise EmptyInputError("A comparison needs at least two results", details={"n_results": len(results)})
    if any(result.test is None for result in results):
        raise InvalidConfigError("Only results with a test report can be compared")
    split_ids = {result.test_split_id for result in results}
    if len(split_ids) != 1:
        raise MismatchedTestSplitError("Results were scored on different test splits", details={"test_split_ids": sorted(split_ids)})

    def rank(result: ExperimentResult) -> int:
        return COMPARISON_ORDER.index(result.mode) if result.mode in COMPARISON_ORDER else len(COMPARISON_ORDER)

    ordered = sorted(results, key=rank)
    baseline = next((r.test for r in ordered if r.mode == "baseline"), None)
    rows: List[ComparisonRow] = []
    for result in ordered:
        metrics = {name: getattr(result.test, name) for name in METRIC_NAMES}
        deltas: Dict[str, Optional[float]] = {}
        for name in METRIC_NAMES:
            reference = getattr(baseline, name) if baseline is not None else None
            deltas[name] = None if reference is None or metrics[name] is None else metrics[name] - reference
        rows.append(ComparisonRow(result.mode, metrics, deltas))
    return ComparisonReport(rows=rows, test_split_id=split_ids.pop())


def render_cv_table(summaries: Dict[str, CrossValSummary]) -> str:
    """Cross-validation mean +/- std per metric (rows) and architecture (columns)."""
    names = list(summaries)
    width = max([16] + [len(name) + 2 for name in names])
    lines = [f"{'Metric':<8}" + "".join(f"{name:>{width}}" for name in names)]
    for metric in METRIC_NAMES:
        cells = []
        for name in names:
            summary = summaries[name]
            if metric in summary.mean:
                cells.append(f"{summary.mean[metric]:.4f} +/- {summary.std[metric]:.4f}".rjust(width))
            else:
                cells.append("-".rjust(width))
        lines.append(f"{metric.upper():<8}" + "".join(cells))
    return "\n".join(lines)
