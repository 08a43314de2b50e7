#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Custom exception classes and error handling utilities for mcaesthetics.

Provides a centralized error handling system with custom exceptions and a
mapping to the stable exit codes of the command line:
0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from dataclasses import dataclass
from typing import List, Optional

from logging_config import StructuredLogger

logger = StructuredLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


# --- Base Exception Classes ---

class AppBaseError(Exception):
    """Base class for all application-specific exceptions.

    Attributes:
        message: Human-readable error message
        error_code: Machine-readable error code
        exit_code: Process exit code to use on the command line
    """

    def __init__(self, message: str, error_code: Optional[str] = None,
                 exit_code: int = EXIT_USAGE):
        """Initialize the exception.

        Args:
            message: Human-readable error message
            error_code: Machine-readable error code
            exit_code: Process exit code to use on the command line
        """
        self.message = message
        self.error_code = error_code or self.__class__.__name__.upper()
        self.exit_code = exit_code
        super().__init__(message)


class UsageError(AppBaseError):
    """Base class for errors caused by how the tool was invoked or configured."""

    def __init__(self, message: str, error_code: Optional[str] = None):
        super().__init__(message, error_code=error_code, exit_code=EXIT_USAGE)


class DataError(AppBaseError):
    """Base class for errors caused by input data (metadata, manifests, images, weights)."""

    def __init__(self, message: str, error_code: Optional[str] = None):
        super().__init__(message, error_code=error_code, exit_code=EXIT_DATA)


class NumericError(AppBaseError):
    """Base class for numeric failures during training."""

    def __init__(self, message: str, error_code: Optional[str] = None):
        super().__init__(message, error_code=error_code, exit_code=EXIT_NUMERIC)


# --- Usage and configuration ---

class InvalidInputError(UsageError):
    """Raised when the user input is invalid."""

    def __init__(self, message: str = "Invalid input"):
        super().__init__(message, error_code="INVALID_INPUT")


class ConfigurationError(UsageError):
    """Raised when a configuration file, key or value is invalid."""

    def __init__(self, message: str = "Configuration error"):
        super().__init__(message, error_code="CONFIG_ERROR")


class BadSpecError(UsageError):
    """Raised when a backbone or head specification violates its invariants."""

    def __init__(self, message: str = "Invalid network specification"):
        super().__init__(message, error_code="BAD_SPEC")


class BadConfigError(UsageError):
    """Raised when a column configuration is invalid."""

    def __init__(self, message: str = "Invalid column configuration"):
        super().__init__(message, error_code="BAD_CONFIG")


class BadFusionError(UsageError):
    """Raised when the fusion classifier does not match the column feature widths."""

    def __init__(self, message: str = "Fusion width mismatch"):
        super().__init__(message, error_code="BAD_FUSION")


# --- Ingestion ---

@dataclass(frozen=True)
class LineError:
    """A per-line parse problem; parsing continues past it."""
    line: int
    reason: str
    text: str = ""

    def __str__(self) -> str:
        return f"line {self.line}: {self.reason}"


class MetadataParseError(DataError):
    """Raised when metadata cannot be parsed at all."""

    def __init__(self, message: str = "Metadata could not be parsed",
                 errors: Optional[List[LineError]] = None):
        super().__init__(message, error_code="METADATA_PARSE")
        self.errors = errors or []


class EmptyHistogramError(DataError):
    """Raised when a vote histogram holds no votes."""

    def __init__(self, message: str = "Vote histogram is empty"):
        super().__init__(message, error_code="EMPTY_HISTOGRAM")


class InvalidRatingError(DataError):
    """Raised when a rating falls outside 1..10."""

    def __init__(self, message: str = "Rating must be within 1..10"):
        super().__init__(message, error_code="INVALID_RATING")


class ClassMissingError(DataError):
    """Raised when stratification finds a class without records."""

    def __init__(self, message: str = "A class has no records"):
        super().__init__(message, error_code="CLASS_MISSING")


class ManifestError(DataError):
    """Raised when a manifest file is unreadable or corrupt."""

    def __init__(self, message: str = "Manifest is corrupt", line: Optional[int] = None,
                 reason: Optional[str] = None):
        super().__init__(message, error_code="MANIFEST_ERROR")
        self.line = line
        self.reason = reason


class MissingImagesError(DataError):
    """Raised under strict ingestion when image files are missing."""

    def __init__(self, message: str = "Image files are missing", missing: int = 0):
        super().__init__(message, error_code="MISSING_IMAGES")
        self.missing = missing


# --- Images and preprocessing ---

class EmptyImageError(DataError):
    """Raised when an image has zero area."""

    def __init__(self, message: str = "Image is empty"):
        super().__init__(message, error_code="EMPTY_IMAGE")


class ImageTooSmallError(DataError):
    """Raised when an image is smaller than the requested crop."""

    def __init__(self, message: str = "Image is smaller than the crop"):
        super().__init__(message, error_code="TOO_SMALL")


class BadCropError(DataError):
    """Raised when a crop rectangle leaves the image bounds."""

    def __init__(self, message: str = "Crop is out of bounds"):
        super().__init__(message, error_code="BAD_CROP")


class BadShapeError(DataError):
    """Raised when an image does not have the expected spatial size."""

    def __init__(self, message: str = "Image has the wrong shape"):
        super().__init__(message, error_code="BAD_SHAPE")


class BadImageError(DataError):
    """Raised when an image file cannot be read or decoded."""

    def __init__(self, message: str = "Image could not be read"):
        super().__init__(message, error_code="BAD_IMAGE")


class InsufficientSeparationError(DataError):
    """Raised when fewer random crops than requested satisfy the separation rule.

    Attributes:
        placed: Number of crops that were placed
        crops: The crops that were placed, in placement order
    """

    def __init__(self, message: str = "Random crops could not be separated", crops=None):
        super().__init__(message, error_code="INSUFFICIENT_SEPARATION")
        self.crops = list(crops or [])
        self.placed = len(self.crops)


class NoVariantError(DataError):
    """Raised when no element of a column menu can be built for an image."""

    def __init__(self, message: str = "No variant could be built"):
        super().__init__(message, error_code="NO_VARIANT")


# --- Networks and training ---

class WeightsIncompatibleError(DataError):
    """Raised when weights do not match the architecture they are loaded into."""

    def __init__(self, message: str = "Weights are incompatible", layer: Optional[str] = None):
        super().__init__(message, error_code="WEIGHTS_INCOMPATIBLE")
        self.layer = layer


class EmptySplitError(DataError):
    """Raised when an evaluation split holds no records."""

    def __init__(self, message: str = "Split is empty"):
        super().__init__(message, error_code="EMPTY_SPLIT")


class ReportError(DataError):
    """Raised when no readable training report is available."""

    def __init__(self, message: str = "No valid report"):
        super().__init__(message, error_code="REPORT_ERROR")


class DivergedError(NumericError):
    """Raised when the training loss becomes non-finite or explodes."""

    def __init__(self, message: str = "Training diverged", epoch: int = 0, batch: int = 0):
        super().__init__(message, error_code="DIVERGED")
        self.epoch = epoch
        self.batch = batch


class FreezeViolationError(NumericError):
    """Raised when a frozen parameter changed during a stage."""

    def __init__(self, message: str = "A frozen parameter changed", parameter: Optional[str] = None):
        super().__init__(message, error_code="FREEZE_VIOLATION")
        self.parameter = parameter


# --- Error Handling Utilities ---

def handle_exception(exception: BaseException) -> int:
    """Convert any exception to a process exit code.

    Args:
        exception: The exception to handle

    Returns:
        int: Exit code following the 0/1/2/3 contract
    """
    if isinstance(exception, AppBaseError):
        # Our custom exceptions already know their exit code
        return exception.exit_code

    elif isinstance(exception, (ValueError, KeyError)):
        # Treat bad values as usage errors
        return EXIT_USAGE

    elif isinstance(exception, (FileNotFoundError, PermissionError)):
        return EXIT_DATA

    else:
        # Unknown exception, log it with the traceback
        logger.error(f"Unexpected error: {type(exception).__name__}: {exception}", exc_info=exception)
        return EXIT_USAGE
