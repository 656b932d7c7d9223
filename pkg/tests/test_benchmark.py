"""Ordering checks of the reduced-scale self-training benchmark."""
from __future__ import annotations

import importlib.util
import json
from pathlib import Path

import pandas as pd
import pytest

BENCHMARK_DIR = Path(__file__).parent / "evaluation"


@pytest.fixture(scope="module")
def benchmark():
    spec = importlib.util.spec_from_file_location(
        "run_selftraining_benchmark", BENCHMARK_DIR / "run_selftraining_benchmark.py",
    )
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


@pytest.fixture(scope="module")
def criteria():
    return json.loads((BENCHMARK_DIR / "sample_benchmark.json").read_text(encoding="utf-8"))["criteria"]


def _frame(acc_by_mode):
    rows = [
        {"mode": mode, "seed": seed, "acc": acc}
        for mode, values in acc_by_mode.items()
        for seed, acc in enumerate(values)
    ]
    return pd.DataFrame(rows)


def test_expected_ordering_passes_every_check(benchmark, criteria):
    gain = criteria["min_gain_over_baseline"]
    frame = _frame({
        "baseline": [0.70, 0.72],
        "proposed": [0.72 + gain, 0.74 + gain],
        "lower_bound": [0.60, 0.62],
        "upper_bound": [0.80, 0.82],
    })
    assert benchmark.check_ordering(frame, criteria) == {
        "proposed_beats_baseline": True,
        "lower_bound_below_proposed": True,
        "upper_bound_near_or_above_proposed": True,
    }


def test_self_training_that_does_not_help_fails(benchmark, criteria):
    frame = _frame({
        "baseline": [0.75, 0.77],
        "proposed": [0.74, 0.75],
        "lower_bound": [0.60, 0.62],
        "upper_bound": [0.80, 0.82],
    })
    checks = benchmark.check_ordering(frame, criteria)
    assert checks["proposed_beats_baseline"] is False
    assert checks["lower_bound_below_proposed"] is True


def test_upper_bound_far_below_proposed_fails(benchmark, criteria):
    frame = _frame({
        "baseline": [0.60],
        "proposed": [0.90],
        "lower_bound": [0.50],
        "upper_bound": [0.90 - criteria["upper_bound_slack"] - 0.05],
    })
    assert benchmark.check_ordering(frame, criteria)["upper_bound_near_or_above_proposed"] is False
