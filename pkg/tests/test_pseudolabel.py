"""Tests for pseudo-label prediction and the augmented training set."""
from __future__ import annotations

import numpy as np
import pytest

from dataset import Domain, GradeLabel
from error_responses import (
    CoverageMismatchError,
    DuplicateImageIdError,
    EmptyPoolError,
    InvalidConfigError,
    LabelLeakageError,
    ManifestFormatError,
)
from label_guard import evaluation_scope
from model import build_ragnet_v2
from pseudolabel import (
    AugmentedDataset,
    Provenance,
    PseudoLabel,
    PseudoLabelSet,
    augment_dataset,
    predict_pseudo_labels,
    pseudo_label_quality,
)
from splits import materialize_target, split_target


@pytest.fixture
def tiny_model(tiny_architecture):
    return build_ragnet_v2("vgg19", seed=0, config=tiny_architecture)


@pytest.fixture
def pool(target):
    pool, _ = materialize_target(target, split_target(target, seed=0))
    return pool


def test_prediction_leaves_parameters_bitwise_unchanged(tiny_model, pool):
    graph, params = tiny_model
    before = params.clone()
    predict_pseudo_labels(params, graph, pool)
    assert params.bitwise_equal(before)


def test_entries_are_on_the_simplex_with_argmax_labels(tiny_model, pool):
    graph, params = tiny_model
    labels = predict_pseudo_labels(params, graph, pool)
    assert labels.image_ids == pool.image_ids
    for entry in labels:
        assert sum(entry.probabilities) == pytest.approx(1.0, abs=1e-6)
        assert entry.hard_label == int(np.argmax(entry.probabilities))
        assert entry.confidence == max(entry.probabilities)


def test_prediction_is_deterministic(tiny_model, pool):
    graph, params = tiny_model
    assert predict_pseudo_labels(params, graph, pool) == predict_pseudo_labels(params, graph, pool)


def test_prediction_reads_no_target_grades(tiny_model, pool, fresh_ledger):
    graph, params = tiny_model
    predict_pseudo_labels(params, graph, pool)
    assert fresh_ledger.total_reads == 0


def test_empty_pool(tiny_model, make_dataset):
    graph, params = tiny_model
    with pytest.raises(EmptyPoolError):
        predict_pseudo_labels(params, graph, make_dataset([], Domain.TARGET))


def test_ties_go_to_the_lower_grade():
    labels = PseudoLabelSet.from_probabilities(["a", "b"], np.array([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]))
    assert labels.hard_labels() == [GradeLabel.HEALTHY, GradeLabel.EARLY]
    assert labels.label_counts() == {"healthy": 1, "early": 1, "advanced": 0}


def test_duplicate_entries_are_rejected():
    entry = PseudoLabel("a", (1.0, 0.0, 0.0), GradeLabel.HEALTHY, 1.0)
    with pytest.raises(DuplicateImageIdError):
        PseudoLabelSet([entry, entry])


def test_csv_round_trip(tmp_path, tiny_model, pool):
    graph, params = tiny_model
    labels = predict_pseudo_labels(params, graph, pool)
    path = labels.to_csv(tmp_path / "pseudo.csv")

    assert path.read_text().splitlines()[0] == "image_id,pseudo_grade,confidence,p_healthy,p_early,p_advanced"
    restored = PseudoLabelSet.from_csv(path)
    assert restored.image_ids == labels.image_ids
    assert restored.hard_labels() == labels.hard_labels()
    assert np.allclose(restored.probability_matrix(), labels.probability_matrix(), atol=1e-12)


def test_csv_with_inconsistent_grade_is_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(
        "image_id,pseudo_grade,confidence,p_healthy,p_early,p_advanced\n"
        "a,2,0.7,0.7,0.2,0.1\n",
        encoding="utf-8",
    )
    with pytest.raises(ManifestFormatError):
        PseudoLabelSet.from_csv(path)


# ============================================================================
# AUGMENTATION
# ============================================================================

def test_augmented_set_is_source_plus_pool(tiny_model, source, pool):
    graph, params = tiny_model
    labels = predict_pseudo_labels(params, graph, pool)
    augmented = augment_dataset(source, pool, labels)

    assert len(augmented) == source.n_samples + pool.n_samples
    assert augmented.provenance_counts() == {
        "source_gt": source.n_samples,
        "target_pseudo": pool.n_samples,
        "target_gt": 0,
    }
    source_part = augmented.with_provenance(Provenance.SOURCE_GT)
    assert [s.label for s in source_part] == source.training_labels()
    assert all(a.scan is b for a, b in zip(source_part, source.scans()))
    pseudo_part = augmented.with_provenance(Provenance.TARGET_PSEUDO)
    assert [s.label for s in pseudo_part] == labels.hard_labels()
    assert augmented.pixel_array().shape == (len(augmented), 248, 384)


def test_augmentation_never_reads_target_grades(tiny_model, source, pool, fresh_ledger):
    graph, params = tiny_model
    labels = predict_pseudo_labels(params, graph, pool)
    augment_dataset(source, pool, labels).training_labels()
    assert fresh_ledger.total_reads == 0


def test_confidence_threshold_drops_uncertain_entries(source, pool):
    probabilities = np.tile([0.5, 0.3, 0.2], (pool.n_samples, 1))
    probabilities[0] = [0.9, 0.05, 0.05]
    labels = PseudoLabelSet.from_probabilities(pool.image_ids, probabilities)

    augmented = augment_dataset(source, pool, labels, threshold=0.8)
    assert augmented.provenance_counts()["target_pseudo"] == 1
    assert augment_dataset(source, pool, labels, threshold=0.0).provenance_counts()["target_pseudo"] == pool.n_samples
    with pytest.raises(InvalidConfigError):
        augment_dataset(source, pool, labels, threshold=1.5)


def test_coverage_must_match_the_pool(source, pool):
    partial = PseudoLabelSet.from_probabilities(pool.image_ids[1:], np.full((pool.n_samples - 1, 3), 1 / 3))
    with pytest.raises(CoverageMismatchError):
        augment_dataset(source, pool, partial)


def test_pseudo_only_set_for_lower_bound(pool):
    labels = PseudoLabelSet.from_probabilities(pool.image_ids, np.tile([0.1, 0.8, 0.1], (pool.n_samples, 1)))
    pseudo_only = AugmentedDataset.from_pseudo(pool, labels)
    assert len(pseudo_only) == pool.n_samples
    assert set(pseudo_only.training_labels()) == {GradeLabel.EARLY}


def test_ground_truth_set_is_an_oracle_read(source, pool, fresh_ledger):
    oracle = AugmentedDataset.from_ground_truth(source, pool)
    assert oracle.provenance_counts()["target_gt"] == pool.n_samples
    assert fresh_ledger.reads_by_reason == {"oracle_training": pool.n_samples}


def test_quality_report_is_diagnostic(source, pool, fresh_ledger):
    with evaluation_scope("test"):
        truth = [int(g) for g in pool.labels()]
    perfect = PseudoLabelSet.from_probabilities(pool.image_ids, np.eye(3)[truth])
    report = pseudo_label_quality(perfect, pool)
    assert report.diagnostic
    assert report.sn == pytest.approx(1.0)
    assert fresh_ledger.reads_by_reason["pseudo_label_quality"] == pool.n_samples


def test_quality_needs_full_coverage(pool):
    partial = PseudoLabelSet.from_probabilities(pool.image_ids[:1], np.full((1, 3), 1 / 3))
    with pytest.raises(CoverageMismatchError):
        pseudo_label_quality(partial, pool)


def test_pool_grades_stay_guarded(pool):
    with pytest.raises(LabelLeakageError):
        pool.training_labels()
