"""Exception types shared across the harness.

Each class carries the process exit code the command line reports for it.
"""

from __future__ import annotations


class CxrBenchError(Exception):
    exit_code = 1


class ValidationError(CxrBenchError, ValueError):
    """Bad arguments, malformed config, or a violated precondition."""

    exit_code = 1


class ManifestParseError(ValidationError):
    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class RegistryLookupError(ValidationError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class DataError(CxrBenchError):
    """Missing images, incomplete logit caches, absent artifacts."""

    exit_code = 2


class StoreError(DataError, OSError):
    exit_code = 2


class TrainingError(CxrBenchError):
    exit_code = 3


class InitializationError(TrainingError):
    """A backbone cannot be constructed with the requested initialisation."""
