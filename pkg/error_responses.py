"""
Error handling for the glaucoma self-training pipeline.
Provides a typed error taxonomy plus standardized error/success payloads that
the command-line interface prints.
"""
from typing import Dict, Any, Optional
from datetime import datetime
import logging

from constants import EXIT_DOMAIN_ERROR

logger = logging.getLogger(__name__)


class ErrorCode:
    """Standard error codes for the application."""
    # Data ingestion
    EMPTY_DATASET = "EMPTY_DATASET"
    INVALID_GRADE = "INVALID_GRADE"
    MISSING_IMAGE = "MISSING_IMAGE"
    DUPLICATE_IMAGE_ID = "DUPLICATE_IMAGE_ID"
    MANIFEST_FORMAT = "MANIFEST_FORMAT"
    NOT_GRAYSCALE = "NOT_GRAYSCALE"
    INVALID_CONFIG = "INVALID_CONFIG"

    # Partitioning
    INSUFFICIENT_PATIENTS = "INSUFFICIENT_PATIENTS"
    INVALID_FRACTION = "INVALID_FRACTION"
    EMPTY_SIDE = "EMPTY_SIDE"
    BAD_FOLD_INDEX = "BAD_FOLD_INDEX"
    DOMAIN_MISMATCH = "DOMAIN_MISMATCH"

    # Model and training
    SHAPE_MISMATCH = "SHAPE_MISMATCH"
    UNKNOWN_BACKBONE = "UNKNOWN_BACKBONE"
    NON_FINITE_LOGIT = "NON_FINITE_LOGIT"
    NOT_ONE_HOT = "NOT_ONE_HOT"
    UNLABELED_SAMPLE = "UNLABELED_SAMPLE"
    EMPTY_TRAIN_SET = "EMPTY_TRAIN_SET"

    # Pseudo-labeling
    EMPTY_POOL = "EMPTY_POOL"
    COVERAGE_MISMATCH = "COVERAGE_MISMATCH"
    MISSING_TRUTH = "MISSING_TRUTH"

    # Metrics
    LENGTH_MISMATCH = "LENGTH_MISMATCH"
    EMPTY_INPUT = "EMPTY_INPUT"
    EMPTY_MATRIX = "EMPTY_MATRIX"
    SINGLE_CLASS_DEGENERATE = "SINGLE_CLASS_DEGENERATE"
    INVALID_SCORES = "INVALID_SCORES"

    # Orchestration and export
    IO_FAILURE = "IO_FAILURE"
    UNKNOWN_MODE = "UNKNOWN_MODE"
    LABEL_LEAKAGE = "LABEL_LEAKAGE"
    MISMATCHED_TEST_SPLIT = "MISMATCHED_TEST_SPLIT"
    INTERNAL_ERROR = "INTERNAL_ERROR"


class GradingError(Exception):
    """Base exception for pipeline domain errors."""

    code: str = ErrorCode.INTERNAL_ERROR

    def __init__(
        self,
        message: str,
        code: Optional[str] = None,
        exit_code: int = EXIT_DOMAIN_ERROR,
        details: Optional[Dict[str, Any]] = None
    ):
        self.message = message
        self.code = code or type(self).code
        self.exit_code = exit_code
        self.details = details or {}
        super().__init__(self.message)


# Data ingestion


class EmptyDatasetError(GradingError, ValueError):
    """Raised when a manifest or dataset holds no samples."""
    code = ErrorCode.EMPTY_DATASET


class InvalidGradeError(GradingError, ValueError):
    """Raised when a grade is outside healthy/early/advanced."""
    code = ErrorCode.INVALID_GRADE


class MissingImageError(GradingError, FileNotFoundError):
    """Raised when a manifest row references an absent file."""
    code = ErrorCode.MISSING_IMAGE


class DuplicateImageIdError(GradingError, ValueError):
    """Raised when two samples share an image id."""
    code = ErrorCode.DUPLICATE_IMAGE_ID


class ManifestFormatError(GradingError, ValueError):
    """Raised when a manifest header or row is malformed."""
    code = ErrorCode.MANIFEST_FORMAT


class NotGrayscaleError(GradingError, ValueError):
    """Raised when an image has more than one channel."""
    code = ErrorCode.NOT_GRAYSCALE


class InvalidConfigError(GradingError, ValueError):
    """Raised when a configuration fails validation."""
    code = ErrorCode.INVALID_CONFIG


# Partitioning


class InsufficientPatientsError(GradingError, ValueError):
    """Raised when there are fewer patients than folds."""
    code = ErrorCode.INSUFFICIENT_PATIENTS


class InvalidFractionError(GradingError, ValueError):
    """Raised when a split fraction is outside (0, 1)."""
    code = ErrorCode.INVALID_FRACTION


class EmptySideError(GradingError, ValueError):
    """Raised when a split side receives no patients."""
    code = ErrorCode.EMPTY_SIDE


class BadFoldIndexError(GradingError, IndexError):
    """Raised when a validation fold index is out of range."""
    code = ErrorCode.BAD_FOLD_INDEX


class DomainMismatchError(GradingError, ValueError):
    """Raised when a dataset belongs to the wrong domain."""
    code = ErrorCode.DOMAIN_MISMATCH


# Model and training


class ShapeMismatchError(GradingError, ValueError):
    """Raised when an array or tensor shape is incompatible."""
    code = ErrorCode.SHAPE_MISMATCH


class UnknownBackboneError(GradingError, ValueError):
    """Raised when a backbone name is not supported."""
    code = ErrorCode.UNKNOWN_BACKBONE


class NonFiniteLogitError(GradingError, ValueError):
    """Raised when a logit vector holds NaN or infinity."""
    code = ErrorCode.NON_FINITE_LOGIT


class NotOneHotError(GradingError, ValueError):
    """Raised when a target vector is not one-hot."""
    code = ErrorCode.NOT_ONE_HOT


class UnlabeledSampleError(GradingError, ValueError):
    """Raised when a training sample carries no label."""
    code = ErrorCode.UNLABELED_SAMPLE


class EmptyTrainSetError(GradingError, ValueError):
    """Raised when the training set is empty."""
    code = ErrorCode.EMPTY_TRAIN_SET


# Pseudo-labeling


class EmptyPoolError(GradingError, ValueError):
    """Raised when the pseudo-label pool is empty."""
    code = ErrorCode.EMPTY_POOL


class CoverageMismatchError(GradingError, ValueError):
    """Raised when pseudo-labels do not cover the pool exactly."""
    code = ErrorCode.COVERAGE_MISMATCH


class MissingTruthError(GradingError, ValueError):
    """Raised when ground truth is unavailable for scoring."""
    code = ErrorCode.MISSING_TRUTH


# Metrics


class LengthMismatchError(GradingError, ValueError):
    """Raised when paired inputs differ in length."""
    code = ErrorCode.LENGTH_MISMATCH


class EmptyInputError(GradingError, ValueError):
    """Raised when there is nothing to score or aggregate."""
    code = ErrorCode.EMPTY_INPUT


class EmptyMatrixError(GradingError, ValueError):
    """Raised when a confusion matrix total is zero."""
    code = ErrorCode.EMPTY_MATRIX


class SingleClassDegenerateError(GradingError, ValueError):
    """Raised when pooled binary labels hold a single class."""
    code = ErrorCode.SINGLE_CLASS_DEGENERATE


class InvalidScoresError(GradingError, ValueError):
    """Raised when score vectors are not points of the probability simplex."""
    code = ErrorCode.INVALID_SCORES


# Orchestration and export


class IoFailureError(GradingError, OSError):
    """Raised when writing an artifact fails."""
    code = ErrorCode.IO_FAILURE


class UnknownModeError(GradingError, ValueError):
    """Raised when an experiment mode is not recognized."""
    code = ErrorCode.UNKNOWN_MODE


class LabelLeakageError(GradingError):
    """Raised when an evaluation-only label is read outside evaluation."""
    code = ErrorCode.LABEL_LEAKAGE


class MismatchedTestSplitError(GradingError, ValueError):
    """Raised when compared results were scored on different test splits."""
    code = ErrorCode.MISMATCHED_TEST_SPLIT


def create_error_response(
    error: Exception,
    run_id: Optional[str] = None,
    include_traceback: bool = False
) -> Dict[str, Any]:
    """
    Create a standardized error payload.

    Args:
        error: The exception that occurred
        run_id: Optional run ID for tracking
        include_traceback: Whether to include traceback (debugging only)

    Returns:
        Dictionary with error details
    """
    if isinstance(error, GradingError):
        error_code = error.code
        message = error.message
        details = error.details
    else:
        error_code = ErrorCode.INTERNAL_ERROR
        message = "An unexpected error occurred"
        details = {}

    response_body: Dict[str, Any] = {
        "success": False,
        "error": {
            "code": error_code,
            "message": message,
            "timestamp": datetime.utcnow().isoformat(),
        }
    }

    if run_id:
        response_body["error"]["run_id"] = run_id

    if details:
        response_body["error"]["details"] = details

    if include_traceback:
        import traceback
        response_body["error"]["traceback"] = traceback.format_exc()

    logger.error(
        f"Error response: {error_code} - {message}",
        extra={
            "error_code": error_code,
            "run_id": run_id,
            "details": details
        }
    )

    return response_body


def create_success_response(
    data: Any,
    message: Optional[str] = None,
    metadata: Optional[Dict[str, Any]] = None
) -> Dict[str, Any]:
    """
    Create a standardized success payload.

    Args:
        data: The response data
        message: Optional success message
        metadata: Optional metadata

    Returns:
        Standardized response dictionary
    """
    response: Dict[str, Any] = {
        "success": True,
        "data": data
    }

    if message:
        response["message"] = message

    if metadata:
        response["metadata"] = metadata

    return response
