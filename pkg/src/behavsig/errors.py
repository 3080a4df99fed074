"""Exception types shared across the package."""

from __future__ import annotations


class BehavsigError(Exception):
    """Base class for all package errors."""


class InvalidInputError(BehavsigError, ValueError):
    pass


class ConflictError(BehavsigError):
    """An id is already present where ids must be unique."""


class StaleStoreError(BehavsigError):
    """Corpus statistics are out of date with respect to the stored records."""


class CorruptionError(BehavsigError):
    def __init__(self, path, line: int, reason: str) -> None:
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason


class IncompatibleFormatError(BehavsigError):
    def __init__(self, path, found: int, expected: int) -> None:
        super().__init__(
            f"{path}: format version {found} is not compatible with supported version {expected}"
        )
        self.found = found
        self.expected = expected


class ParamsMismatchError(BehavsigError):
    """Persisted LSH parameters disagree with the ones requested."""
