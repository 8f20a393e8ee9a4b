"""Exception types shared across the package."""


class OrioleError(Exception):
    pass


class InputError(OrioleError, ValueError):
    """Bad arguments, empty inputs, unknown labels."""


class DimensionError(InputError):
    """Array shapes that do not line up."""


class NumericError(OrioleError, ArithmeticError):
    """Non-finite values produced during optimization."""
