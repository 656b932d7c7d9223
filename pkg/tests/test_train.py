"""Tests for the loss, the Adadelta update and the training loop."""
from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch

from architecture import ArchitectureConfig
from dataset import Dataset, GradeLabel, Sample, SynthConfig, generate_synthetic
from error_responses import (
    EmptyTrainSetError,
    MissingTruthError,
    NotOneHotError,
    ShapeMismatchError,
    UnlabeledSampleError,
)
from label_guard import evaluation_scope
from model import build_ragnet_v2, softmax
from train import (
    OptimizerState,
    TrainingConfig,
    adadelta_step,
    batch_loss,
    cross_entropy,
    evaluate_model,
    finite_difference_check,
    load_checkpoint,
    save_checkpoint,
    save_training_checkpoints,
    train_model,
)


# ============================================================================
# LOSS
# ============================================================================

def test_cross_entropy_reference_values():
    assert cross_entropy([1, 0, 0], [1.0, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-6)
    assert cross_entropy([1, 0, 0], [1 / 3, 1 / 3, 1 / 3]) == pytest.approx(math.log(3), abs=1e-6)
    assert cross_entropy([1, 0, 0], [0.0, 0.5, 0.5]) == pytest.approx(-math.log(1e-7), abs=1e-6)
    assert -math.log(1e-7) == pytest.approx(16.118, abs=1e-3)


@pytest.mark.parametrize("target", [[0.5, 0.5, 0.0], [1, 1, 0], [0, 0, 0], [1, 0]])
def test_cross_entropy_requires_one_hot(target):
    with pytest.raises(NotOneHotError):
        cross_entropy(target, [1 / 3, 1 / 3, 1 / 3])


def test_batch_loss_is_mean_of_clamped_cross_entropy():
    logits = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [40.0, -40.0, 0.0]], dtype=torch.float64)
    targets = torch.tensor([2, 0, 1])
    expected = np.mean([
        cross_entropy(np.eye(3)[t], softmax(row)) for row, t in zip(logits.numpy(), targets.numpy())
    ])
    assert float(batch_loss(logits, targets)) == pytest.approx(expected, abs=1e-9)
    assert float(batch_loss(logits, targets)) <= -math.log(1e-7)


# ============================================================================
# ADADELTA
# ============================================================================

def _hyper(**overrides):
    return TrainingConfig(**overrides)


def test_adadelta_first_step_reference():
    params = {"w": torch.zeros(1, dtype=torch.float64)}
    grads = {"w": torch.ones(1, dtype=torch.float64)}
    updated, state = adadelta_step(params, grads, OptimizerState.fresh(params), _hyper())

    expected = -math.sqrt(1e-6) / math.sqrt(0.05 + 1e-6)
    assert float(updated["w"]) == pytest.approx(expected, abs=1e-9)
    assert float(updated["w"]) == pytest.approx(-0.0044719, abs=5e-7)
    assert float(state.square_avg["w"]) == pytest.approx(0.05, abs=1e-12)
    assert float(state.acc_delta["w"]) == pytest.approx(0.05 * expected ** 2, abs=1e-15)


def test_adadelta_zero_gradient_only_decays_accumulators():
    params = {"w": torch.tensor([0.3, -1.2], dtype=torch.float64)}
    state = OptimizerState({"w": torch.full((2,), 2.0, dtype=torch.float64)}, {"w": torch.full((2,), 4.0, dtype=torch.float64)})
    updated, new_state = adadelta_step(params, {"w": torch.zeros(2, dtype=torch.float64)}, state, _hyper())

    assert torch.equal(updated["w"], params["w"])
    assert torch.allclose(new_state.square_avg["w"], torch.full((2,), 1.9, dtype=torch.float64))
    assert torch.allclose(new_state.acc_delta["w"], torch.full((2,), 3.8, dtype=torch.float64))
    assert torch.equal(state.square_avg["w"], torch.full((2,), 2.0, dtype=torch.float64))


def test_adadelta_is_deterministic():
    params = {"w": torch.randn(3, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))}
    grads = {"w": torch.randn(3, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(1))}
    state = OptimizerState.fresh(params)
    first, first_state = adadelta_step(params, grads, state, _hyper())
    second, second_state = adadelta_step(params, grads, state, _hyper())
    assert torch.equal(first["w"], second["w"])
    assert torch.equal(first_state.acc_delta["w"], second_state.acc_delta["w"])


def test_adadelta_matches_torch_optimizer():
    generator = torch.Generator().manual_seed(7)
    start = torch.randn(4, 3, dtype=torch.float64, generator=generator)
    grads = [torch.randn(4, 3, dtype=torch.float64, generator=generator) for _ in range(6)]

    reference = start.clone().requires_grad_(True)
    optimizer = torch.optim.Adadelta([reference], lr=1.0, rho=0.95, eps=1e-6)
    params, state = {"w": start.clone()}, OptimizerState.fresh({"w": start})
    for grad in grads:
        optimizer.zero_grad()
        reference.grad = grad.clone()
        optimizer.step()
        params, state = adadelta_step(params, {"w": grad}, state, _hyper())

    assert torch.allclose(params["w"], reference.detach(), atol=1e-9, rtol=0)


def test_adadelta_rejects_mismatches():
    params = {"w": torch.zeros(2)}
    with pytest.raises(ShapeMismatchError):
        adadelta_step(params, {"v": torch.zeros(2)}, OptimizerState.fresh(params), _hyper())
    with pytest.raises(ShapeMismatchError):
        adadelta_step(params, {"w": torch.zeros(3)}, OptimizerState.fresh(params), _hyper())


# ============================================================================
# TRAINING LOOP
# ============================================================================

@pytest.fixture
def tiny_model(tiny_architecture):
    return build_ragnet_v2("vgg19", seed=0, config=tiny_architecture)


def test_zero_epochs_returns_inputs(tiny_model, source):
    graph, params = tiny_model
    trained, trace = train_model(graph, params, source, None, TrainingConfig(epochs=0))
    assert trained is params
    assert len(trace) == 0


def test_training_updates_only_unfrozen_parameters(tiny_model, source, tiny_training):
    graph, params = tiny_model
    before = params.clone()
    config = tiny_training.model_copy(update={"epochs": 2, "checkpoint_selection": "last"})
    trained, trace = train_model(graph, params, source, None, config)

    assert len(trace) == 2
    assert trained.bitwise_equal(before, names=graph.frozen_parameter_names())
    assert not trained.bitwise_equal(before, names=["classifier.weight"])
    assert params.bitwise_equal(before)
    assert all(0.0 <= loss <= -math.log(1e-7) for loss in trace.losses)


def test_training_is_deterministic(tiny_model, source, tiny_training):
    graph, params = tiny_model
    config = tiny_training.model_copy(update={"epochs": 2, "shuffle_seed": 5})
    first, first_trace = train_model(graph, params, source, source, config)
    second, second_trace = train_model(graph, params, source, source, config)
    assert first.bitwise_equal(second)
    assert first_trace.to_dict() == second_trace.to_dict()


def test_best_validation_epoch_is_selected(tiny_model, source, tiny_training):
    graph, params = tiny_model
    config = tiny_training.model_copy(update={"epochs": 3})
    _, trace = train_model(graph, params, source, source, config)

    accuracies = [record.validation.acc for record in trace.epochs]
    assert trace.best_epoch == accuracies.index(max(accuracies)) + 1
    assert trace.selection == "best_validation"


def test_empty_and_unlabeled_training_sets(tiny_model, make_dataset, target):
    graph, params = tiny_model
    empty = make_dataset([])
    with pytest.raises(EmptyTrainSetError):
        train_model(graph, params, empty, None, TrainingConfig(epochs=1))

    unlabeled = Dataset([Sample(target[0].scan, None)], target.domain)
    with pytest.raises(UnlabeledSampleError):
        train_model(graph, params, unlabeled, None, TrainingConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path, tiny_model, source, tiny_training):
    graph, params = tiny_model
    state = OptimizerState.fresh(params.trainable())
    path = save_checkpoint(tmp_path / "ckpt", graph, params, tiny_training, epoch=7, state=state)

    restored_graph, restored, config, epoch, restored_state = load_checkpoint(path)
    assert restored_graph == graph
    assert restored.bitwise_equal(params)
    assert config == tiny_training
    assert epoch == 7
    assert set(restored_state.square_avg) == set(params.trainable_names)


def test_trace_carries_the_full_run_model_and_optimizer_states(tiny_model, source, tiny_training):
    graph, params = tiny_model
    trained, trace = train_model(graph, params, source, source, tiny_training.model_copy(update={"epochs": 3}))

    assert trace.selected_epoch == trace.best_epoch
    assert trace.selected_state is trace.best_state
    assert set(trace.final_state.square_avg) == set(params.trainable_names)
    assert trace.final_params.bitwise_equal(trained) == (trace.best_epoch == 3)

    last, last_trace = train_model(
        graph, params, source, source,
        tiny_training.model_copy(update={"epochs": 3, "checkpoint_selection": "last"}),
    )
    assert last_trace.selected_epoch == 3
    assert last_trace.selected_state is last_trace.final_state
    assert last.bitwise_equal(last_trace.final_params)
    assert last_trace.without_models().final_params is None


def test_training_checkpoints_keep_selected_and_full_run_models(tmp_path, tiny_model, source, tiny_training):
    graph, params = tiny_model
    config = tiny_training.model_copy(update={"epochs": 3})
    trained, trace = train_model(graph, params, source, source, config)

    selected_path, last_path = save_training_checkpoints(tmp_path, graph, trained, trace, config)
    assert selected_path == tmp_path / "checkpoint"
    assert last_path == tmp_path / "checkpoint_last"

    _, selected, _, selected_epoch, selected_state = load_checkpoint(selected_path)
    assert selected.bitwise_equal(trained)
    assert selected_epoch == trace.best_epoch
    for name in params.trainable_names:
        assert torch.equal(selected_state.acc_delta[name], trace.best_state.acc_delta[name])

    _, last, _, last_epoch, last_state = load_checkpoint(last_path)
    assert last.bitwise_equal(trace.final_params)
    assert last_epoch == 3
    for name in params.trainable_names:
        assert torch.equal(last_state.square_avg[name], trace.final_state.square_avg[name])
    assert json.loads((last_path / "checkpoint.json").read_text())["has_optimizer"] is True


def test_evaluating_ungraded_samples_names_the_split(tiny_model, target):
    graph, params = tiny_model
    partly_graded = Dataset([Sample(target[0].scan, None, eval_only=True), target[1]], target.domain)
    with evaluation_scope("test"):
        with pytest.raises(MissingTruthError) as excinfo:
            evaluate_model(params, graph, partly_graded, split="test")
    assert excinfo.value.details["split"] == "test"
    assert excinfo.value.details["image_ids"] == [target[0].image_id]


def test_trace_is_written_as_json_lines(tmp_path, tiny_model, source, tiny_training):
    graph, params = tiny_model
    _, trace = train_model(graph, params, source, source, tiny_training.model_copy(update={"epochs": 2}))
    lines = trace.write_jsonl(tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert '"epoch": 1' in lines[0]


# ============================================================================
# GRADIENTS
# ============================================================================

def test_analytic_gradients_match_finite_differences():
    config = ArchitectureConfig(input_height=32, input_width=32, width_divisor=32, embedding_channels=6)
    graph, params = build_ragnet_v2("vgg19", seed=3, config=config)
    rng = np.random.default_rng(0)
    pixels = rng.random((4, 248, 384))
    labels = [GradeLabel.HEALTHY, GradeLabel.EARLY, GradeLabel.ADVANCED, GradeLabel.EARLY]

    checks = finite_difference_check(graph, params, pixels, labels, n_params=20, h=1e-4, seed=1)
    assert len(checks) == 20
    assert all(check.name in params.trainable_names for check in checks)
    worst = max(checks, key=lambda check: check.relative_error)
    assert worst.relative_error <= 1e-3, worst


@pytest.mark.slow
def test_small_separable_set_is_learned():
    source, _ = generate_synthetic(SynthConfig(n_patients_source=30, n_patients_target=1, samples_per_patient=(1, 1), seed=0))
    config = ArchitectureConfig(input_height=48, input_width=64, width_divisor=8, embedding_channels=12, frozen_blocks=0)
    graph, params = build_ragnet_v2("vgg16", seed=0, config=config)

    training = TrainingConfig(epochs=50, batch_size=4, checkpoint_selection="last")
    trained, trace = train_model(graph, params, source, None, training)

    assert trace.losses[-1] < trace.losses[0]
    assert evaluate_model(trained, graph, source).sn >= 0.95
