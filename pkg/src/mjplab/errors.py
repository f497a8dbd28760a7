"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """Invalid or conflicting run configuration."""


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""
