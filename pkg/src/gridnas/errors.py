"""Exception types shared across the package."""


class GridNasError(Exception):
    """Base class for all package errors."""


class ShapeError(GridNasError, ValueError):
    """Tensor dimensions do not agree with an operation's contract."""


class ContractError(GridNasError, ValueError):
    """A call violates a documented precondition."""


class NumericError(GridNasError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(GridNasError, ValueError):
    """Invalid or inconsistent configuration."""
