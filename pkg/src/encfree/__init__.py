"""Encoder-free video-language model mechanisms at desk scale."""

from .errors import (CapacityError, ContractError, EncFreeError, FormatError, InputError, NumericError,
                     ShapeError, StructureError)

__version__ = "0.1.0"

__all__ = ["EncFreeError", "ShapeError", "NumericError", "ContractError", "StructureError",
           "InputError", "CapacityError", "FormatError", "__version__"]
