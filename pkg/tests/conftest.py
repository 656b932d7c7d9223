"""
Shared fixtures: a tiny synthetic source/target pair and reduced-scale
network settings so end-to-end paths finish in seconds on CPU.
"""
from __future__ import annotations

import numpy as np
import pytest

from architecture import ArchitectureConfig
from dataset import BScan, Dataset, Domain, GradeLabel, Sample, SynthConfig, generate_synthetic
from label_guard import use_ledger
from train import TrainingConfig

TINY_ARCHITECTURE = ArchitectureConfig(
    input_height=48,
    input_width=64,
    width_divisor=32,
    embedding_channels=6,
)

TINY_SYNTH = SynthConfig(
    n_patients_source=10,
    n_patients_target=9,
    samples_per_patient=(1, 2),
    seed=3,
)


@pytest.fixture
def fresh_ledger():
    """A ledger of its own for tests that count label reads."""
    with use_ledger() as ledger:
        yield ledger


@pytest.fixture
def tiny_architecture() -> ArchitectureConfig:
    return TINY_ARCHITECTURE


@pytest.fixture
def tiny_synth() -> SynthConfig:
    return TINY_SYNTH


@pytest.fixture
def tiny_training() -> TrainingConfig:
    return TrainingConfig(epochs=1, batch_size=8, eval_batch_size=16)


@pytest.fixture(scope="session")
def synthetic_pair():
    return generate_synthetic(TINY_SYNTH)


@pytest.fixture
def source(synthetic_pair) -> Dataset:
    return synthetic_pair[0]


@pytest.fixture
def target(synthetic_pair) -> Dataset:
    return synthetic_pair[1]


def _make_scan(image_id: str, patient_id: str, value: float = 0.5, domain: Domain = Domain.SOURCE) -> BScan:
    return BScan(image_id=image_id, patient_id=patient_id, pixels=np.full((248, 384), value), domain=domain)


def _make_dataset(patients, domain: Domain = Domain.SOURCE, samples_per_patient: int = 1) -> Dataset:
    """Constant-image dataset with one grade per patient (cycling 0, 1, 2)."""
    samples = []
    for index, patient in enumerate(patients):
        for scan in range(samples_per_patient):
            image_id = f"{patient}-{scan}"
            samples.append(Sample(
                _make_scan(image_id, patient, value=(index % 10) / 10.0, domain=domain),
                GradeLabel(index % 3),
                eval_only=domain == Domain.TARGET,
            ))
    return Dataset(samples, domain)


@pytest.fixture
def make_scan():
    return _make_scan


@pytest.fixture
def make_dataset():
    return _make_dataset
