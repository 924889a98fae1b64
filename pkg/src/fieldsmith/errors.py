"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FieldsmithError(Exception):
    """Base class for all package errors."""


class ConfigError(FieldsmithError):
    """Invalid configuration or CLI arguments (exit code 2)."""


class DatasetError(FieldsmithError):
    """Malformed dataset, manifest, or view (exit code 2)."""


class SynthesisError(FieldsmithError):
    """Synthesis backend failure (exit code 3).

    ``retryable`` marks transient failures; ``retry_after`` carries the
    suggested backoff in seconds when the server provided one.
    """

    def __init__(self, message: str, *, retryable: bool = False,
                 retry_after: float | None = None):
        super().__init__(message)
        self.retryable = retryable
        self.retry_after = retry_after


class TrainingDiverged(FieldsmithError):
    """Non-finite loss encountered during optimization (exit code 3)."""

    def __init__(self, message: str, *, step: int | None = None,
                 loss: float | None = None):
        super().__init__(message)
        self.step = step
        self.loss = loss
