"""Exceptions raised across the hypervoltran pipeline."""

from typing import Dict, Optional


class DatasetLoadError(OSError):
    """A dataset file is missing or cannot be decoded."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"Failed to load {self.path}: {reason}")


class CheckpointError(ValueError):
    """A checkpoint does not match the expected format, config or parameter shapes."""


class NumericalError(RuntimeError):
    """A loss or parameter became non-finite during optimization."""

    def __init__(self, message: str, terms: Optional[Dict[str, float]] = None):
        self.terms = dict(terms or {})
        if self.terms:
            details = ", ".join(f"{name}={value!r}" for name, value in self.terms.items())
            message = f"{message} ({details})"
        super().__init__(message)
