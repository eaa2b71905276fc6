"""Exception hierarchy shared by every module."""
from __future__ import annotations


class CanError(Exception):
    """Base class for all library errors."""


class ContractViolation(CanError, ValueError):
    pass


class SchemaMismatch(CanError, ValueError):
    pass


class ParseError(CanError, ValueError):
    def __init__(self, message: str, row: int | None = None, column: int | str | None = None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


class NonFiniteGradient(CanError, FloatingPointError):
    pass


class NonFiniteLoss(CanError, FloatingPointError):
    pass


class SingularSystem(CanError, ArithmeticError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


class CyclicAfterThreshold(CanError, ValueError):
    pass


class BudgetExhausted(CanError, RuntimeError):
    """Rejection sampling ran out of draws before collecting enough matches.

    ``partial`` holds the accepted rows, ``acceptance_rate`` the observed rate.
    """

    def __init__(self, partial, acceptance_rate: float, requested: int):
        super().__init__(
            f"collected {len(partial)} of {requested} samples; acceptance rate {acceptance_rate:.4g}"
        )
        self.partial = partial
        self.acceptance_rate = acceptance_rate
        self.requested = requested
