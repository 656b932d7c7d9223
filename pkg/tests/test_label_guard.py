"""Tests for the evaluation-only label guard."""
from __future__ import annotations

import pytest

from error_responses import LabelLeakageError
from label_guard import (
    LabelAccessLedger,
    active_ledger,
    current_scope,
    evaluation_scope,
    record_read,
    use_ledger,
)


def test_reads_outside_a_scope_are_refused(fresh_ledger):
    with pytest.raises(LabelLeakageError) as excinfo:
        record_read("T-P0001-00")
    assert excinfo.value.details == {"image_id": "T-P0001-00"}
    assert fresh_ledger.refused == 1
    assert fresh_ledger.total_reads == 0


def test_reads_are_counted_per_reason(fresh_ledger):
    with evaluation_scope("test"):
        record_read("a")
        record_read("b")
    with evaluation_scope("pseudo_label_quality"):
        record_read("a")
    assert fresh_ledger.reads_by_reason == {"pseudo_label_quality": 1, "test": 2}
    assert fresh_ledger.total_reads == 3


def test_scopes_nest_and_restore():
    assert current_scope() is None
    with evaluation_scope("test"):
        with evaluation_scope("oracle_training"):
            assert current_scope() == "oracle_training"
        assert current_scope() == "test"
    assert current_scope() is None


def test_scope_closes_on_error(fresh_ledger):
    with pytest.raises(RuntimeError):
        with evaluation_scope("test"):
            raise RuntimeError("boom")
    with pytest.raises(LabelLeakageError):
        record_read("a")


def test_ledgers_are_isolated():
    outer = active_ledger()
    with use_ledger() as first:
        with evaluation_scope():
            record_read("a")
        with use_ledger(LabelAccessLedger()) as second:
            assert active_ledger() is second
            assert second.total_reads == 0
        assert active_ledger() is first
    assert first.reads_by_reason == {"evaluation": 1}
    assert active_ledger() is outer
