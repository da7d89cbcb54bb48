"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class NumericError(FloatingPointError):
    """A computation produced or received non-finite values."""


class ContractError(ValueError):
    """A caller violated an operation's calling contract."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss and stopped with diagnostics."""
