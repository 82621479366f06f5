"""
errors.py

Exception types raised across the package.

Input problems derive from ValueError so callers that already catch ValueError keep
working; runtime faults in training or numerics derive from RuntimeError.
"""


class F2FError(Exception):
    """Root of every error raised by this package."""


class RejectedInputError(F2FError, ValueError):
    """A function received data that violates its preconditions."""


class ConfigError(F2FError, ValueError):
    """A run configuration failed validation."""

    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class TrainingFault(F2FError, RuntimeError):
    """A training step produced a non-finite loss or gradient."""

    def __init__(self, message: str, details: dict = None):
        super().__init__(message)
        self.details = details or {}


class NumericalFault(F2FError, RuntimeError):
    """A numerical routine produced non-finite or out-of-contract values."""

    def __init__(self, message: str, stage: str = ""):
        super().__init__(f"[{stage}] {message}" if stage else message)
        self.stage = stage
