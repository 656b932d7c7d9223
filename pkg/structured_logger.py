"""
Structured logging for the glaucoma self-training pipeline.
Provides JSON logging with run/stage/fold context and helpers for training,
timing and label-access audit events.
"""
import logging
import json
import time
import traceback
from typing import Dict, Any, Optional
from datetime import datetime
from contextvars import ContextVar

from config import settings

# Context variables for run tracking
run_id_var: ContextVar[str] = ContextVar('run_id', default='')
stage_var: ContextVar[str] = ContextVar('stage', default='')
fold_var: ContextVar[Optional[int]] = ContextVar('fold', default=None)


class StructuredLogger:
    """Structured logger with context awareness."""

    def __init__(self, name: str):
        self.logger = logging.getLogger(name)
        self._setup_logger()

    def _setup_logger(self):
        """Setup logger with proper formatting."""
        if not self.logger.handlers:
            # Console handler
            console_handler = logging.StreamHandler()
            console_handler.setLevel(getattr(logging, settings.log_level))

            formatter = logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            )
            console_handler.setFormatter(formatter)

            self.logger.addHandler(console_handler)
            self.logger.setLevel(logging.DEBUG if settings.log_file else getattr(logging, settings.log_level))
            self.logger.propagate = False

            if settings.log_file:
                file_handler = logging.FileHandler(settings.log_file)
                file_handler.setLevel(logging.DEBUG)
                file_handler.setFormatter(formatter)
                self.logger.addHandler(file_handler)

    def _get_context(self) -> Dict[str, Any]:
        """Get current context information."""
        context: Dict[str, Any] = {
            'run_id': run_id_var.get(''),
            'stage': stage_var.get(''),
            'timestamp': datetime.utcnow().isoformat(),
        }
        fold = fold_var.get(None)
        if fold is not None:
            context['fold'] = fold
        return context

    def _log_structured(self, level: str, message: str, **kwargs):
        """Log structured message with context."""
        if not self.logger.isEnabledFor(getattr(logging, level)):
            return

        context = self._get_context()
        context.update(kwargs)

        if not settings.log_json:
            extras = " ".join(f"{key}={value}" for key, value in context.items() if value not in ('', None))
            self.logger.log(getattr(logging, level), f"{message} {extras}".rstrip())
            return

        log_data = {
            'level': level,
            'message': message,
            'context': context
        }

        if level == 'ERROR' and 'exception' in kwargs:
            log_data['traceback'] = traceback.format_exc()

        self.logger.log(getattr(logging, level), json.dumps(log_data, default=str))

    def info(self, message: str, **kwargs):
        """Log info message."""
        self._log_structured('INFO', message, **kwargs)

    def warning(self, message: str, **kwargs):
        """Log warning message."""
        self._log_structured('WARNING', message, **kwargs)

    def error(self, message: str, **kwargs):
        """Log error message."""
        self._log_structured('ERROR', message, **kwargs)

    def debug(self, message: str, **kwargs):
        """Log debug message."""
        self._log_structured('DEBUG', message, **kwargs)


class PerformanceLogger:
    """Logger for timing pipeline stages."""

    def __init__(self):
        self.logger = StructuredLogger('performance')
        self._timers: Dict[str, float] = {}

    def start_timer(self, operation: str) -> str:
        """Start timing an operation."""
        timer_id = f"{operation}:{time.perf_counter_ns()}"
        self._timers[timer_id] = time.perf_counter()
        return timer_id

    def end_timer(self, timer_id: str, **kwargs) -> float:
        """End timing, log the duration and return it in seconds."""
        started = self._timers.pop(timer_id, None)
        if started is None:
            return 0.0
        duration = time.perf_counter() - started
        self.logger.info(
            f"Performance: {timer_id.split(':')[0]} completed",
            duration_ms=round(duration * 1000, 2),
            **kwargs
        )
        return duration


class TrainingLogger:
    """Logger for training progress."""

    def __init__(self):
        self.logger = StructuredLogger('training')

    def log_epoch(self, epoch: int, loss: float, accuracy: float,
                  validation: Optional[Dict[str, Any]] = None, **kwargs):
        """Log a finished epoch."""
        self.logger.info(
            "Epoch finished",
            event_type="epoch",
            epoch=epoch,
            train_loss=round(loss, 6),
            train_accuracy=round(accuracy, 6),
            validation=validation,
            **kwargs
        )


class AuditLogger:
    """Logger for evaluation-only label access."""

    def __init__(self):
        self.logger = StructuredLogger('audit')

    def log_label_access(self, reason: str, count: int, **kwargs):
        """Log a batch of permitted evaluation-only label reads."""
        self.logger.debug(
            "Evaluation-only labels read",
            event_type="label_access",
            reason=reason,
            count=count,
            **kwargs
        )

    def log_label_leakage(self, image_id: str, **kwargs):
        """Log a refused label read."""
        self.logger.error(
            "Label leakage refused",
            event_type="label_leakage",
            image_id=image_id,
            **kwargs
        )


# Global logger instances
performance_logger = PerformanceLogger()
training_logger = TrainingLogger()
audit_logger = AuditLogger()


def get_logger(name: str) -> StructuredLogger:
    """Get a structured logger instance."""
    return StructuredLogger(name)


def set_run_context(run_id: str, stage: str = '', fold: Optional[int] = None):
    """Set run context for logging."""
    run_id_var.set(run_id)
    stage_var.set(stage)
    fold_var.set(fold)


def set_stage(stage: str, fold: Optional[int] = None):
    """Update the stage (and fold) of the current run context."""
    stage_var.set(stage)
    fold_var.set(fold)


def clear_run_context():
    """Clear run context."""
    run_id_var.set('')
    stage_var.set('')
    fold_var.set(None)


def log_exception(logger: StructuredLogger, message: str, exception: Exception, **kwargs):
    """Log exception with traceback."""
    logger.error(
        message,
        exception=str(exception),
        exception_type=type(exception).__name__,
        **kwargs
    )
