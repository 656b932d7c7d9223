"""Benchmark harnesses for the self-training pipeline."""
