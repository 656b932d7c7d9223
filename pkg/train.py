"""
Training engine: mini-batch cross-entropy minimization with Adadelta updates
restricted to the unfrozen parameters, validated after every epoch.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, ValidationError

from architecture import ArchitectureGraph
from constants import (
    ADADELTA_EPSILON,
    ADADELTA_LEARNING_RATE,
    ADADELTA_RHO,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_EVAL_BATCH_SIZE,
    LOSS_FLOOR,
)
from dataset import Dataset
from error_responses import (
    EmptyTrainSetError,
    InvalidConfigError,
    IoFailureError,
    MissingTruthError,
    NotOneHotError,
    ShapeMismatchError,
)
from metrics import MetricReport, report_from_probabilities
from model import ModelParameters, predict_proba, prepare_inputs, run_network
from structured_logger import get_logger, performance_logger, training_logger
from weight_bundle import load_model, save_bundle

logger = get_logger(__name__)

CHECKPOINT_FILENAME = "checkpoint.json"
TRACE_FILENAME = "training_trace.jsonl"
SELECTED_CHECKPOINT_DIR = "checkpoint"
LAST_CHECKPOINT_DIR = "checkpoint_last"


class TrainingConfig(BaseModel):
    """Optimization settings."""
    epochs: int = Field(default=DEFAULT_EPOCHS, ge=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    rho: float = Field(default=ADADELTA_RHO, gt=0.0, lt=1.0)
    eps: float = Field(default=ADADELTA_EPSILON, gt=0.0)
    learning_rate: float = Field(default=ADADELTA_LEARNING_RATE, gt=0.0)
    shuffle_seed: int = 0
    loss_floor: float = Field(default=LOSS_FLOOR, gt=0.0, lt=1.0)
    checkpoint_selection: Literal["best_validation", "last"] = "best_validation"
    eval_batch_size: int = Field(default=DEFAULT_EVAL_BATCH_SIZE, ge=1)

    @classmethod
    def parse(cls, data: Any) -> "TrainingConfig":
        try:
            if isinstance(data, cls):
                return data
            return cls.model_validate(data or {})
        except ValidationError as exc:
            raise InvalidConfigError(
                "Invalid training configuration",
                details={"errors": json.loads(exc.json(include_url=False))},
            ) from exc


class LabeledData(Protocol):
    """Anything that can supply stacked pixels and supervision labels."""

    def __len__(self) -> int: ...

    def pixel_array(self) -> np.ndarray: ...

    def training_labels(self) -> Sequence[int]: ...


@dataclass
class OptimizerState:
    """Adadelta running averages of squared gradients and squared updates."""
    square_avg: Dict[str, torch.Tensor]
    acc_delta: Dict[str, torch.Tensor]

    @classmethod
    def fresh(cls, params: Dict[str, torch.Tensor]) -> "OptimizerState":
        return cls(
            square_avg={name: torch.zeros_like(t) for name, t in params.items()},
            acc_delta={name: torch.zeros_like(t) for name, t in params.items()},
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    validation: Optional[MetricReport]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "train_accuracy": self.train_accuracy,
            "validation": self.validation.to_dict() if self.validation else None,
        }


@dataclass
class TrainingTrace:
    """
    Per-epoch records of one training run.

    Besides the records, the trace holds the full-run parameters and the
    optimizer state after the last epoch, and the optimizer state of the best
    validation epoch, so both checkpoints can be written.
    """
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    selection: str = "best_validation"
    final_params: Optional[ModelParameters] = field(default=None, repr=False)
    final_state: Optional[OptimizerState] = field(default=None, repr=False)
    best_state: Optional[OptimizerState] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def losses(self) -> List[float]:
        return [record.loss for record in self.epochs]

    @property
    def selected_epoch(self) -> int:
        """Epoch whose parameters train_model returned (0 when nothing ran)."""
        if self.selection == "best_validation" and self.best_epoch is not None:
            return self.best_epoch
        return len(self.epochs)

    @property
    def selected_state(self) -> Optional[OptimizerState]:
        if self.selection == "best_validation" and self.best_epoch is not None:
            return self.best_state
        return self.final_state

    def without_models(self) -> "TrainingTrace":
        """Records only; drops parameters and optimizer state."""
        return TrainingTrace(list(self.epochs), self.best_epoch, self.selection)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "best_epoch": self.best_epoch,
            "selection": self.selection,
            "epochs": [record.to_dict() for record in self.epochs],
        }

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        """One JSON object per epoch."""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", encoding="utf-8") as handle:
                for record in self.epochs:
                    handle.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        except OSError as exc:
            raise IoFailureError(f"Failed to write {path}: {exc}", details={"path": str(path)}) from exc
        return path


# ============================================================================
# LOSS AND OPTIMIZER
# ============================================================================

def cross_entropy(y: Sequence[float], y_hat: Sequence[float], floor: float = LOSS_FLOOR) -> float:
    """
    -sum(y * log(max(y_hat, floor))) for a one-hot target.

    Raises:
        NotOneHotError: If y is not a one-hot vector matching y_hat
    """
    target = np.asarray(y, dtype=np.float64)
    predicted = np.asarray(y_hat, dtype=np.float64)
    if target.shape != predicted.shape or not np.isin(target, (0.0, 1.0)).all() or target.sum() != 1.0:
        raise NotOneHotError(f"Target {target.tolist()} is not one-hot", details={"y": target.tolist()})
    return float(-(target * np.log(np.maximum(predicted, floor))).sum())


def batch_loss(logits: torch.Tensor, targets: torch.Tensor, floor: float = LOSS_FLOOR) -> torch.Tensor:
    """Mean clamped cross-entropy of a batch of logits against class indices."""
    probabilities = F.softmax(logits, dim=1).clamp_min(floor)
    return -probabilities.log().gather(1, targets[:, None]).mean()


def adadelta_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor],
                  state: OptimizerState, hyper: TrainingConfig) -> Tuple[Dict[str, torch.Tensor], OptimizerState]:
    """
    One Adadelta update, returning new parameters and state.

        E[g^2]  <- rho E[g^2] + (1 - rho) g^2
        delta   =  sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
        E[dx^2] <- rho E[dx^2] + (1 - rho) delta^2
        x       <- x - lr * delta

    Raises:
        ShapeMismatchError: If names or shapes of params, grads and state disagree
    """
    if set(params) != set(grads) or set(params) != set(state.square_avg):
        raise ShapeMismatchError(
            "Parameters, gradients and optimizer state cover different names",
            details={"params": sorted(params), "grads": sorted(grads)},
        )

    new_params: Dict[str, torch.Tensor] = {}
    square_avg: Dict[str, torch.Tensor] = {}
    acc_delta: Dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, value in params.items():
            grad = grads[name]
            if grad.shape != value.shape or state.square_avg[name].shape != value.shape:
                raise ShapeMismatchError(
                    f"Gradient of {name} has shape {tuple(grad.shape)}, parameter has {tuple(value.shape)}",
                    details={"name": name},
                )
            square_avg[name] = hyper.rho * state.square_avg[name] + (1.0 - hyper.rho) * grad * grad
            delta = torch.sqrt(state.acc_delta[name] + hyper.eps) / torch.sqrt(square_avg[name] + hyper.eps) * grad
            acc_delta[name] = hyper.rho * state.acc_delta[name] + (1.0 - hyper.rho) * delta * delta
            new_params[name] = value - hyper.learning_rate * delta
    return new_params, OptimizerState(square_avg, acc_delta)


def loss_and_gradients(params: ModelParameters, graph: ArchitectureGraph, inputs: torch.Tensor,
                       targets: torch.Tensor, floor: float = LOSS_FLOOR) -> Tuple[float, torch.Tensor, Dict[str, torch.Tensor]]:
    """Batch loss, logits and gradients with respect to the trainable tensors only."""
    trainable = {name: t.detach().requires_grad_(True) for name, t in params.trainable().items()}
    bound = ModelParameters({**params.tensors, **trainable}, params.frozen)
    logits = run_network(bound, graph, inputs)[graph.output_layer]
    loss = batch_loss(logits, targets, floor)
    gradients = torch.autograd.grad(loss, list(trainable.values()))
    return float(loss.detach()), logits.detach(), dict(zip(trainable, gradients))


# ============================================================================
# TRAINING LOOP
# ============================================================================

def evaluate_model(params: ModelParameters, graph: ArchitectureGraph, dataset: Dataset,
                   batch_size: int = DEFAULT_EVAL_BATCH_SIZE, diagnostic: bool = False,
                   split: str = "evaluation") -> MetricReport:
    """
    Score a labeled dataset; evaluation-only grades need an open evaluation scope.

    Raises:
        MissingTruthError: If a sample of the ``split`` being scored has no grade
    """
    grades = dataset.labels()
    missing = [sample.image_id for sample, grade in zip(dataset, grades) if grade is None]
    if missing:
        raise MissingTruthError(
            f"{len(missing)} samples of the {split} split carry no grade",
            details={"split": split, "image_ids": missing[:10]},
        )
    probabilities = predict_proba(params, graph, dataset, batch_size)
    return report_from_probabilities(probabilities, [int(g) for g in grades], diagnostic=diagnostic)


def train_model(graph: ArchitectureGraph, params: ModelParameters, train_set: LabeledData,
                val_set: Optional[Dataset], config: Optional[TrainingConfig] = None) -> Tuple[ModelParameters, TrainingTrace]:
    """
    Train the unfrozen parameters for ``config.epochs`` epochs.

    Each epoch draws a seeded permutation, walks it in mini-batches (the
    last one may be short) and applies one Adadelta step per batch. The
    validation set is scored after every epoch; with the best_validation
    selection the parameters of the epoch with the highest validation ACC
    (earliest on ties) are returned. The returned trace carries the
    full-run parameters and optimizer states for checkpointing.

    Raises:
        EmptyTrainSetError: If train_set has no samples
        UnlabeledSampleError: If any training sample carries no grade
    """
    config = TrainingConfig.parse(config)
    if len(train_set) == 0:
        raise EmptyTrainSetError("Training set is empty")
    labels = torch.as_tensor([int(label) for label in train_set.training_labels()], dtype=torch.long)
    trace = TrainingTrace(selection=config.checkpoint_selection, final_params=params)
    if config.epochs == 0:
        return params, trace

    pixels = train_set.pixel_array()
    n_samples = len(labels)
    generator = torch.Generator().manual_seed(config.shuffle_seed)
    state = OptimizerState.fresh(params.trainable())
    current = params
    best_params: Optional[ModelParameters] = None
    best_acc = -math.inf

    timer = performance_logger.start_timer("train_model")
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(n_samples, generator=generator).numpy()
        loss_sum = 0.0
        correct = 0
        for start in range(0, n_samples, config.batch_size):
            index = order[start:start + config.batch_size]
            inputs = prepare_inputs(pixels[index], graph, current.dtype)
            targets = labels[index]
            loss, logits, gradients = loss_and_gradients(current, graph, inputs, targets, config.loss_floor)
            updated, state = adadelta_step(current.trainable(), gradients, state, config)
            current = current.replace(updated)
            loss_sum += loss * len(index)
            correct += int((logits.argmax(dim=1) == targets).sum())

        validation = None
        if val_set is not None and len(val_set):
            validation = evaluate_model(current, graph, val_set, config.eval_batch_size, split="validation")
            if validation.acc > best_acc:
                best_acc, best_params = validation.acc, current
                trace.best_epoch, trace.best_state = epoch, state

        record = EpochRecord(epoch, loss_sum / n_samples, correct / n_samples, validation)
        trace.epochs.append(record)
        training_logger.log_epoch(
            epoch, record.loss, record.train_accuracy,
            validation.to_dict() if validation else None,
        )
    performance_logger.end_timer(timer, epochs=config.epochs, n_samples=n_samples)
    trace.final_params, trace.final_state = current, state

    if config.checkpoint_selection == "best_validation" and best_params is not None:
        return best_params, trace
    return current, trace


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(out_dir: Union[str, Path], graph: ArchitectureGraph, params: ModelParameters,
                    config: TrainingConfig, epoch: int, state: Optional[OptimizerState] = None) -> Path:
    """Weight bundle under ``weights/``, optimizer arrays under ``optimizer/`` and checkpoint.json."""
    out_dir = Path(out_dir)
    save_bundle(params, out_dir / "weights", graph)
    try:
        if state is not None:
            optimizer_dir = out_dir / "optimizer"
            optimizer_dir.mkdir(parents=True, exist_ok=True)
            for name in state.square_avg:
                np.save(optimizer_dir / f"square_avg__{name}.npy", state.square_avg[name].numpy())
                np.save(optimizer_dir / f"acc_delta__{name}.npy", state.acc_delta[name].numpy())
        meta = {"epoch": epoch, "training": config.model_dump(mode="json"), "has_optimizer": state is not None}
        (out_dir / CHECKPOINT_FILENAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailureError(f"Failed to write checkpoint {out_dir}: {exc}", details={"path": str(out_dir)}) from exc
    return out_dir


def save_training_checkpoints(out_dir: Union[str, Path], graph: ArchitectureGraph, params: ModelParameters,
                              trace: TrainingTrace, config: TrainingConfig) -> List[Path]:
    """
    Write the selected model under ``checkpoint/`` and the full-run model
    under ``checkpoint_last/``, each with the optimizer state of its epoch.

    ``params`` are the parameters train_model returned; the trace supplies
    the selected epoch, the full-run parameters and both optimizer states.
    """
    out_dir = Path(out_dir)
    selected = save_checkpoint(
        out_dir / SELECTED_CHECKPOINT_DIR, graph, params, config,
        epoch=trace.selected_epoch, state=trace.selected_state,
    )
    last = save_checkpoint(
        out_dir / LAST_CHECKPOINT_DIR, graph, trace.final_params if trace.final_params is not None else params,
        config, epoch=len(trace), state=trace.final_state,
    )
    logger.info("Checkpoints saved", selected_epoch=trace.selected_epoch, last_epoch=len(trace), selection=trace.selection)
    return [selected, last]


def load_checkpoint(path: Union[str, Path]) -> Tuple[ArchitectureGraph, ModelParameters, TrainingConfig, int, Optional[OptimizerState]]:
    path = Path(path)
    graph, params = load_model(path / "weights")
    try:
        meta = json.loads((path / CHECKPOINT_FILENAME).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise IoFailureError(f"Failed to read checkpoint {path}: {exc}", details={"path": str(path)}) from exc

    state = None
    if meta.get("has_optimizer"):
        optimizer_dir = path / "optimizer"
        names = params.trainable_names
        state = OptimizerState(
            {n: torch.from_numpy(np.load(optimizer_dir / f"square_avg__{n}.npy")) for n in names},
            {n: torch.from_numpy(np.load(optimizer_dir / f"acc_delta__{n}.npy")) for n in names},
        )
    return graph, params, TrainingConfig.parse(meta["training"]), int(meta["epoch"]), state


# ============================================================================
# GRADIENT VERIFICATION
# ============================================================================

@dataclass(frozen=True)
class GradientCheck:
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-6)


def finite_difference_check(graph: ArchitectureGraph, params: ModelParameters, pixels: np.ndarray,
                            labels: Sequence[int], n_params: int = 20, h: float = 1e-4,
                            seed: int = 0) -> List[GradientCheck]:
    """
    Compare autograd gradients with central differences in double precision.

    Entries are drawn uniformly from all trainable scalars. An entry whose
    difference quotients at h and h/2 disagree straddles a ReLU or max-pool
    kink and is redrawn, since neither quotient estimates the derivative there.
    """
    params64 = params.to(torch.float64)
    inputs = prepare_inputs(pixels, graph, torch.float64)
    targets = torch.as_tensor([int(label) for label in labels], dtype=torch.long)
    _, _, gradients = loss_and_gradients(params64, graph, inputs, targets)

    def loss_at(name: str, index: Tuple[int, ...], offset: float) -> float:
        tensor = params64.tensors[name].clone()
        tensor[index] += offset
        with torch.no_grad():
            logits = run_network(params64.replace({name: tensor}), graph, inputs)[graph.output_layer]
            return float(batch_loss(logits, targets))

    def quotient(name: str, index: Tuple[int, ...], step: float) -> float:
        return (loss_at(name, index, step) - loss_at(name, index, -step)) / (2.0 * step)

    names = params64.trainable_names
    sizes = np.array([params64.tensors[name].numel() for name in names])
    rng = np.random.default_rng(seed)
    checks: List[GradientCheck] = []
    for _ in range(n_params * 10):
        if len(checks) == n_params:
            break
        flat = int(rng.integers(sizes.sum()))
        slot = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        name = names[slot]
        index = tuple(int(i) for i in np.unravel_index(flat - int(sizes[:slot].sum()), tuple(params64.tensors[name].shape)))

        numeric = quotient(name, index, h)
        half = quotient(name, index, h / 2.0)
        if abs(numeric - half) > 1e-4 * max(abs(numeric), abs(half), 1e-6):
            logger.debug("Skipping kink-straddling entry", name=name, index=list(index))
            continue
        checks.append(GradientCheck(name, index, float(gradients[name][index]), numeric))
    return checks
