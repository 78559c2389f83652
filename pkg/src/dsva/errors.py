"""Exception hierarchy for dsva."""

from pathlib import Path
from typing import Optional


class DSVAError(Exception):
    """Base error for dsva."""
    pass


class ContractError(DSVAError):
    """A precondition or contract was violated."""
    pass


class ShapeError(ContractError):
    """Tensor or array dimensions do not conform."""
    pass


class NumericError(ContractError):
    """A value or gradient became non-finite."""
    pass


class VocabularyError(ContractError):
    """Token outside the closed vocabulary."""
    pass


class GenerationError(ContractError):
    """Scene generation could not satisfy its configuration."""
    pass


class ConfigError(ContractError):
    """Unknown or malformed configuration entry."""
    pass


class UsageError(ContractError):
    """Bad command line."""
    pass


class FormatError(DSVAError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message: str, offset: int = 0):
        """
        Initialize format error.

        Args:
            message: What was wrong
            offset: Byte offset at which the problem was detected
        """
        super().__init__(f"{message} (at byte offset {offset})")
        self.detail = message
        self.offset = offset


class TrainingError(ContractError):
    """Training run aborted."""

    def __init__(self, message: str, last_good: Optional[Path] = None):
        suffix = f"; last good checkpoint: {last_good}" if last_good else ""
        super().__init__(message + suffix)
        self.last_good = last_good
