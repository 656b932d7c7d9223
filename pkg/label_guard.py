"""
Access guard for evaluation-only labels.

Target-domain ground truth is attached to datasets but may only be read while an
evaluation scope is open. Every permitted read is counted in the active
ledger so an experiment can prove how many target labels it touched, and in
which phase.
"""
from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Dict, Iterator, Optional

from error_responses import LabelLeakageError
from structured_logger import audit_logger

_scope_var: ContextVar[Optional[str]] = ContextVar('label_scope', default=None)


class LabelAccessLedger:
    """Counts evaluation-only label reads per scope reason."""

    def __init__(self) -> None:
        self._reads: Counter = Counter()
        self.refused = 0

    def record(self, reason: str, count: int = 1) -> None:
        self._reads[reason] += count

    @property
    def reads_by_reason(self) -> Dict[str, int]:
        return dict(sorted(self._reads.items()))

    @property
    def total_reads(self) -> int:
        return sum(self._reads.values())


_default_ledger = LabelAccessLedger()
_ledger_var: ContextVar[LabelAccessLedger] = ContextVar('label_ledger', default=_default_ledger)


def active_ledger() -> LabelAccessLedger:
    return _ledger_var.get()


def current_scope() -> Optional[str]:
    return _scope_var.get()


@contextmanager
def use_ledger(ledger: Optional[LabelAccessLedger] = None) -> Iterator[LabelAccessLedger]:
    """Install a fresh (or given) ledger for the duration of the block."""
    ledger = ledger or LabelAccessLedger()
    token = _ledger_var.set(ledger)
    try:
        yield ledger
    finally:
        _ledger_var.reset(token)


@contextmanager
def evaluation_scope(reason: str = "evaluation") -> Iterator[None]:
    """Permit evaluation-only label reads inside the block."""
    token = _scope_var.set(reason)
    try:
        yield
    finally:
        _scope_var.reset(token)


def record_read(image_id: str) -> None:
    """
    Account for one evaluation-only label read.

    Raises:
        LabelLeakageError: If no evaluation scope is open
    """
    reason = _scope_var.get()
    ledger = _ledger_var.get()
    if reason is None:
        ledger.refused += 1
        audit_logger.log_label_leakage(image_id)
        raise LabelLeakageError(
            f"Evaluation-only label of {image_id!r} read outside an evaluation scope",
            details={"image_id": image_id},
        )
    ledger.record(reason)
