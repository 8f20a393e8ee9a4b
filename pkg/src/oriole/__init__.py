"""Desk-scale reproduction of multi-cloak poisoning against feature-space cloaking."""

from .errors import DimensionError, InputError, NumericError, OrioleError

__version__ = "0.1.0"

__all__ = ["DimensionError", "InputError", "NumericError", "OrioleError", "__version__"]
