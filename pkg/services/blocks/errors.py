"""Error types shared by all blocks. exit_code feeds the CLI."""

from typing import List, Optional


class FKBridgeError(Exception):
    exit_code = 1


class DomainError(FKBridgeError, ValueError):
    """Precondition violated: bad sizes, times, grids or arguments."""


class NumericError(FKBridgeError, ArithmeticError):
    """Non-finite values, nonpositive fields, divisions by ~0."""


class ConvergenceError(FKBridgeError):
    def __init__(self, message: str, history: Optional[List[float]] = None):
        super().__init__(message)
        self.history = list(history or [])


class ConsistencyError(FKBridgeError):
    """Kernels, fields and grids that do not fit together."""


class ConfigError(FKBridgeError):
    exit_code = 2

    def __init__(self, message: str, field: str = "config"):
        super().__init__(message)
        self.field = field
