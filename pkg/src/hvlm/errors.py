"""Exception taxonomy shared by every hvlm module."""


class HvlmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HvlmError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(HvlmError, ValueError):
    """A configuration value or argument is outside its valid range."""


class ContractError(HvlmError, RuntimeError):
    """An API precondition was violated (e.g. non-scalar loss in backward)."""


class NumericError(HvlmError, ArithmeticError):
    """A non-finite value appeared where finite arithmetic is required."""


class StateError(HvlmError, RuntimeError):
    """Operation requires state (e.g. a trained checkpoint) that is absent."""
