"""
Exception hierarchy for the IPTW toolkit

Every error carries the exit code the CLI returns when it escapes a command.
"""
from typing import Optional


class IPTWError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1


class ParameterError(IPTWError, ValueError):
    """Invalid parameter, rank-deficient design or dimension mismatch"""

    exit_code = 2


class SeparationError(IPTWError, RuntimeError):
    """Logistic fit diverged because the response is (quasi-)separated"""

    exit_code = 3


class ConvergenceError(IPTWError, RuntimeError):
    """A quantity was requested from a fit that did not converge"""

    exit_code = 3


class EstimationError(IPTWError, RuntimeError):
    """Weighted estimation is impossible (empty arm, positivity violation)"""

    exit_code = 3


class DomainError(IPTWError, ValueError):
    """Marginal means outside the domain of the requested effect measure"""

    exit_code = 3


class InputError(IPTWError, ValueError):
    """Malformed user input: CSV files, column roles, scenario documents"""

    exit_code = 2

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        self.row = row
        self.column = column
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column!r}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class StrategyFailure(IPTWError, RuntimeError):
    """A missing-data strategy could not produce an estimate for one dataset"""

    exit_code = 3

    def __init__(self, strategy: str, reason: str):
        self.strategy = strategy
        self.reason = reason
        super().__init__(f"{strategy}: {reason}")
