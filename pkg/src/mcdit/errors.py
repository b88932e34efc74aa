"""Shared exception types."""


class DimensionError(ValueError):
    """Shapes or widths of operands do not line up."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigurationError(ValueError):
    """Missing or inconsistent configuration (adapters, config keys, stages)."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, corrupted, or from an unknown version."""
