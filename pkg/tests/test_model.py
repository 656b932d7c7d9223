"""Tests for network construction, the forward pass and weight bundles."""
from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from error_responses import EmptyInputError, NonFiniteLogitError, ShapeMismatchError
from model import (
    build_ragnet_v2,
    build_vgg_baseline,
    forward,
    predict_proba,
    prepare_inputs,
    softmax,
)
from weight_bundle import load_bundle, load_model, load_pretrained_backbone, save_bundle, torchvision_key_map


@pytest.fixture
def tiny_model(tiny_architecture):
    return build_ragnet_v2("vgg19", seed=0, config=tiny_architecture)


# ============================================================================
# SOFTMAX
# ============================================================================

def test_softmax_reference_values():
    assert np.allclose(softmax(np.array([1.0, 2.0, 3.0])), [0.0900306, 0.2447285, 0.6652410], atol=1e-6)


def test_softmax_is_stable_for_large_logits():
    probabilities = softmax(np.array([1000.0, 1000.0, -1000.0]))
    assert np.allclose(probabilities, [0.5, 0.5, 0.0])


@settings(max_examples=300, deadline=None)
@given(
    logits=st.lists(st.floats(-50, 50), min_size=3, max_size=3),
    shift=st.floats(-100, 100),
)
def test_softmax_shift_invariance(logits, shift):
    base = softmax(np.array(logits))
    assert np.isclose(base.sum(), 1.0)
    assert np.allclose(softmax(np.array(logits) + shift), base, atol=1e-9)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NonFiniteLogitError):
        softmax(np.array([0.0, bad, 1.0]))


# ============================================================================
# CONSTRUCTION
# ============================================================================

def test_initialization_is_seeded(tiny_architecture):
    _, first = build_ragnet_v2("vgg19", seed=4, config=tiny_architecture)
    _, second = build_ragnet_v2("vgg19", seed=4, config=tiny_architecture)
    _, other = build_ragnet_v2("vgg19", seed=5, config=tiny_architecture)
    assert first.bitwise_equal(second)
    assert not first.bitwise_equal(other)


def test_frozen_flags_follow_the_graph(tiny_model):
    graph, params = tiny_model
    assert params.frozen_names == graph.frozen_parameter_names()
    assert set(params.trainable_names) | set(params.frozen_names) == set(params.names)
    assert list(params.classifier) == ["classifier.weight", "classifier.bias"]
    assert "classifier.weight" not in params.encoder


def test_pretrained_backbone_is_loaded(tiny_architecture):
    graph, reference = build_vgg_baseline("vgg16", seed=1, config=tiny_architecture)
    backbone = {name: array for name, array in reference.to_numpy().items() if name.startswith("block")}
    _, params = build_ragnet_v2("vgg16", pretrained_weights=backbone, seed=2, config=tiny_architecture)
    assert params.bitwise_equal(reference, names=list(backbone))


def test_pretrained_backbone_must_fit(tiny_architecture):
    _, reference = build_vgg_baseline("vgg19", seed=1, config=tiny_architecture)
    weights = {name: array for name, array in reference.to_numpy().items() if name.startswith("block")}

    incomplete = dict(weights)
    incomplete.pop("block4_conv1.weight")
    with pytest.raises(ShapeMismatchError):
        build_ragnet_v2("vgg19", pretrained_weights=incomplete, config=tiny_architecture)

    reshaped = dict(weights)
    reshaped["block1_conv1.weight"] = np.zeros((1, 1, 1, 1), dtype=np.float32)
    with pytest.raises(ShapeMismatchError):
        build_ragnet_v2("vgg19", pretrained_weights=reshaped, config=tiny_architecture)


def test_replace_checks_shapes(tiny_model):
    _, params = tiny_model
    with pytest.raises(ShapeMismatchError):
        params.replace({"classifier.bias": torch.zeros(4)})
    with pytest.raises(ShapeMismatchError):
        params.replace({"nonexistent.weight": torch.zeros(1)})


# ============================================================================
# FORWARD PASS
# ============================================================================

def test_prepare_inputs_replicates_gray_channels(tiny_model):
    graph, _ = tiny_model
    inputs = prepare_inputs(np.random.default_rng(0).random((2, 248, 384), dtype=np.float32), graph)
    assert inputs.shape == (2, 3, 48, 64)
    assert torch.equal(inputs[:, 0], inputs[:, 2])


def test_forward_trace_shapes_and_wiring(tiny_model, source):
    graph, params = tiny_model
    traces = forward(params, graph, source.scans()[:3])
    assert len(traces) == 3

    theta, bias = params.classifier_weights, params.classifier_bias
    for trace in traces:
        assert trace.feature_volume.shape == graph.feature_shape
        assert trace.attention_mask is not None
        assert np.all((trace.attention_mask > 0.0) & (trace.attention_mask < 1.0))
        # Global average pooling of the feature volume
        assert np.allclose(trace.embedding, trace.feature_volume.mean(axis=(0, 1)), atol=1e-6)
        assert np.allclose(trace.logits, trace.embedding @ theta + bias, atol=1e-5)
        assert np.allclose(trace.probabilities, softmax(trace.logits))


def test_vgg_baseline_has_no_attention(tiny_architecture, source):
    graph, params = build_vgg_baseline("vgg19", seed=0, config=tiny_architecture)
    trace = forward(params, graph, source.scans()[:1])[0]
    assert trace.attention_mask is None
    assert trace.feature_volume.shape == graph.feature_shape


def test_predict_proba_is_deterministic_and_batch_independent(tiny_model, source):
    graph, params = tiny_model
    whole = predict_proba(params, graph, source, batch_size=32)
    single = predict_proba(params, graph, source, batch_size=1)
    assert whole.shape == (source.n_samples, 3)
    assert np.allclose(whole.sum(axis=1), 1.0)
    assert np.allclose(whole, single, atol=1e-6)
    assert np.array_equal(whole, predict_proba(params, graph, source, batch_size=32))


def test_prediction_leaves_parameters_untouched(tiny_model, source):
    graph, params = tiny_model
    before = params.clone()
    predict_proba(params, graph, source)
    forward(params, graph, source.scans()[:2])
    assert params.bitwise_equal(before)


def test_forward_rejects_off_size_pixels(tiny_model):
    graph, params = tiny_model
    with pytest.raises(ShapeMismatchError):
        predict_proba(params, graph, np.zeros((1, 10, 10)))


def test_empty_batch_is_rejected(tiny_model, target):
    graph, params = tiny_model
    with pytest.raises(EmptyInputError):
        predict_proba(params, graph, [])
    with pytest.raises(EmptyInputError):
        forward(params, graph, [])
    with pytest.raises(EmptyInputError):
        predict_proba(params, graph, target.subset_by_patients([]))


# ============================================================================
# WEIGHT BUNDLES
# ============================================================================

def test_bundle_round_trip(tmp_path, tiny_model):
    graph, params = tiny_model
    save_bundle(params, tmp_path / "bundle", graph)

    bundle = load_bundle(tmp_path / "bundle")
    assert bundle.architecture == graph.config
    assert bundle.frozen == params.frozen

    restored_graph, restored = load_model(tmp_path / "bundle")
    assert restored_graph == graph
    assert restored.bitwise_equal(params)


def test_bundle_must_fit_the_graph(tmp_path, tiny_architecture):
    graph, params = build_vgg_baseline("vgg19", seed=0, config=tiny_architecture)
    save_bundle(params, tmp_path / "vgg", graph)
    with pytest.raises(ShapeMismatchError):
        load_model(tmp_path / "vgg", config=tiny_architecture)


def test_torchvision_keys_are_renamed(tiny_architecture):
    mapping = torchvision_key_map("vgg16")
    assert mapping["features.0.weight"] == "block1_conv1.weight"
    assert mapping["features.5.bias"] == "block2_conv1.bias"
    assert mapping["features.28.weight"] == "block5_conv3.weight"

    _, reference = build_vgg_baseline("vgg16", seed=3, config=tiny_architecture)
    arrays = reference.to_numpy()
    inverse = {graph_name: tv_name for tv_name, graph_name in mapping.items()}
    state_dict = {inverse[name]: torch.from_numpy(array) for name, array in arrays.items() if name in inverse}
    state_dict["classifier.6.weight"] = torch.zeros(10, 10)

    weights = load_pretrained_backbone(state_dict, "vgg16")
    assert set(weights) == set(inverse)
    assert all(np.array_equal(weights[name], arrays[name]) for name in weights)


def test_pretrained_state_dict_file(tmp_path, tiny_architecture):
    _, reference = build_vgg_baseline("vgg16", seed=3, config=tiny_architecture)
    inverse = {graph_name: tv_name for tv_name, graph_name in torchvision_key_map("vgg16").items()}
    state_dict = {inverse[name]: torch.from_numpy(array) for name, array in reference.to_numpy().items() if name in inverse}
    torch.save(state_dict, tmp_path / "vgg16.pth")

    weights = load_pretrained_backbone(tmp_path / "vgg16.pth", "vgg16")
    assert set(weights) == set(inverse)
