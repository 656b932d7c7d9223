"""
Reduced-scale benchmark for the self-training comparison.

Usage:
    python -m tests.evaluation.run_selftraining_benchmark [benchmark.json]

Runs every mode in ``sample_benchmark.json`` for each seed on synthetic
source/target data with a fixed acquisition shift, averages test ACC per mode
and checks the expected ordering:

- proposed >= baseline + min_gain_over_baseline
- lower_bound <= proposed
- upper_bound >= proposed - upper_bound_slack

Modes of one seed share their stage-1 cross-validation through a
``StageOneCache``. Exit status is 0 when every check holds.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any, Dict, List

import pandas as pd

from orchestrate import StageOneCache, compare_report, run_experiment
from structured_logger import get_logger, performance_logger

DATASET_PATH = Path(__file__).parent / "sample_benchmark.json"

logger = get_logger(__name__)


def _seeded(experiment: Dict[str, Any], mode: str, seed: int) -> Dict[str, Any]:
    config = json.loads(json.dumps(experiment))
    config["mode"] = mode
    config["seeds"] = {"split": seed, "init": seed, "shuffle": seed}
    config.setdefault("synthetic", {})["seed"] = seed
    return config


def run_benchmark(benchmark: Dict[str, Any]) -> pd.DataFrame:
    """One row per (seed, mode) with the five test metrics."""
    rows: List[Dict[str, Any]] = []
    for seed in benchmark["seeds"]:
        cache = StageOneCache()
        results = []
        for mode in benchmark["modes"]:
            timer = performance_logger.start_timer("benchmark_run")
            result = run_experiment(_seeded(benchmark["experiment"], mode, seed), cache=cache)
            performance_logger.end_timer(timer, mode=mode, seed=seed)
            results.append(result)
            rows.append({"seed": seed, "mode": mode, **result.test.to_dict()})
        print(f"[seed {seed}]")
        print(compare_report(results).render())
    return pd.DataFrame(rows)


def check_ordering(frame: pd.DataFrame, criteria: Dict[str, float]) -> Dict[str, bool]:
    acc = frame.groupby("mode")["acc"].mean()
    checks = {
        "proposed_beats_baseline": acc["proposed"] >= acc["baseline"] + criteria["min_gain_over_baseline"],
        "lower_bound_below_proposed": acc["lower_bound"] <= acc["proposed"],
        "upper_bound_near_or_above_proposed": acc["upper_bound"] >= acc["proposed"] - criteria["upper_bound_slack"],
    }
    return {name: bool(passed) for name, passed in checks.items()}


def main(argv: List[str]) -> int:
    path = Path(argv[0]) if argv else DATASET_PATH
    if not path.exists():
        raise FileNotFoundError(f"Benchmark file not found at {path}.")
    benchmark = json.loads(path.read_text(encoding="utf-8"))

    frame = run_benchmark(benchmark)
    summary = frame.groupby("mode")[["sn", "sp", "fs", "acc", "auc"]].agg(["mean", "std"])
    print("\nMean test metrics over seeds")
    print(summary.round(4).to_string())

    checks = check_ordering(frame, benchmark["criteria"])
    for name, passed in checks.items():
        print(f"{'PASS' if passed else 'FAIL'} {name}")
    logger.info("Benchmark finished", seeds=len(benchmark["seeds"]), checks=checks)
    print("\nMean ACC: " + ", ".join(f"{mode}={value:.4f}" for mode, value in frame.groupby("mode")["acc"].mean().items()))
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
