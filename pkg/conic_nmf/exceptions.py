"""Exception hierarchy shared by every conic_nmf module."""

from typing import List, Optional


class ConicNMFError(Exception):
    """Base class for all library errors."""


class InvalidInputError(ConicNMFError, ValueError):
    """Raised when caller-supplied data cannot be used (bad rank, nonpositive factors, ...)."""


class ContractViolation(ConicNMFError, AssertionError):
    """Raised when an internal pre/post-condition fails (dimension mismatch, negative FW gap)."""


class MatrixParseError(InvalidInputError):
    """Raised when a matrix file is empty, malformed or ragged."""


class MatrixValidationError(InvalidInputError):
    """Raised when a matrix entry is negative or non-finite."""

    def __init__(self, message: str, row: Optional[int] = None, col: Optional[int] = None):
        super().__init__(message)
        self.row = row
        self.col = col


class UnknownInstanceError(ConicNMFError, KeyError):
    """Raised for names missing from the builtin instance catalog."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown instance"


class UnsupportedInputError(InvalidInputError):
    """Raised when a formulation cannot represent the input (zeros under the exp form)."""


class SingularityError(ConicNMFError, ArithmeticError):
    """Raised when the SOC objective gradient is evaluated at a zero entry outside the pattern."""


class InvalidProgramError(InvalidInputError):
    """Raised when a ConicProgram fails validation; carries the diagnostics."""

    def __init__(self, diagnostics: List[str]):
        super().__init__("invalid conic program: " + "; ".join(diagnostics))
        self.diagnostics = list(diagnostics)
