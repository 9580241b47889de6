"""
Error types for BagRank.

Every error carries a stable ``code`` so the CLI can print a single
machine-parseable line (``ERROR <code>: <message>``).
"""

from __future__ import annotations

from typing import Optional


class BagRankError(RuntimeError):
    """Base class for all BagRank errors."""

    code = "BagRank"

    def one_line(self) -> str:
        message = " ".join(str(self).split())
        return f"ERROR {self.code}: {message}"


class ConfigError(BagRankError):
    """Raised when a configuration value is out of range."""

    code = "Config"


class DimMismatchError(BagRankError):
    code = "DimMismatch"


class ZeroRowError(BagRankError):
    """Raised when a row cannot be L2-normalized."""

    code = "ZeroRow"

    def __init__(self, row_index: int, message: Optional[str] = None):
        self.row_index = row_index
        super().__init__(message or f"row {row_index} has (near) zero norm")


class NotNormalizedError(BagRankError):
    code = "NotNormalized"


class EmptyInputError(BagRankError):
    code = "EmptyInput"


class EmptyVocabularyError(BagRankError):
    code = "EmptyVocabulary"


class DuplicateEntryError(BagRankError):
    code = "DuplicateEntry"


class EmptyEntryError(BagRankError):
    code = "EmptyEntry"


class CoverageMismatchError(BagRankError):
    code = "CoverageMismatch"


class EmptyMaskError(BagRankError):
    code = "EmptyMask"


class GridMismatchError(BagRankError):
    code = "GridMismatch"


class NonSquareError(BagRankError):
    code = "NonSquare"


class NonPositiveTauError(BagRankError):
    code = "NonPositiveTau"


class DivergenceDetectedError(BagRankError):
    code = "DivergenceDetected"


class DuplicateIdError(BagRankError):
    code = "DuplicateId"


class UnknownItemError(BagRankError):
    code = "UnknownItem"


class UnsupportedModeError(BagRankError):
    code = "UnsupportedMode"


class MissingLateMatrixError(BagRankError):
    code = "MissingLateMatrix"


class MissingQrelError(BagRankError):
    code = "MissingQrel"


class FormatError(BagRankError):
    """Raised when an on-disk file does not match its declared layout."""

    code = "BadFormat"
