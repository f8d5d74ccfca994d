# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Exception hierarchy for fsrel.

Every error carries the process exit code the CLI reports for it:
0 success, 2 configuration error, 3 numerical abort, 4 data integrity error.
"""

from pathlib import Path
from typing import Optional


class FsrelError(Exception):
    """Base class for all fsrel errors."""

    exit_code: int = 1


class ConfigurationError(FsrelError):
    exit_code = 2


class DatasetParseError(FsrelError):
    """A dataset, split or support file does not follow its schema."""

    exit_code = 4

    def __init__(self, record: str, message: str):
        self.record = record
        super().__init__(f"{record}: {message}")


class IntegrityError(FsrelError):
    exit_code = 4


class VocabularyError(FsrelError, KeyError):
    exit_code = 4

    def __str__(self) -> str:
        # KeyError quotes its argument
        return str(self.args[0]) if self.args else ""


class ContractViolation(FsrelError, ValueError):
    pass


class SamplingError(FsrelError):
    pass


class ProtocolError(FsrelError):
    pass


class NumericalAbort(FsrelError):
    """Raised when a training step produces a non-finite loss."""

    exit_code = 3

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        self.dump_path = dump_path
        if dump_path is not None:
            message = f"{message} (episode dumped to {dump_path})"
        super().__init__(message)
