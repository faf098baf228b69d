"""Exception hierarchy shared by every module.

The CLI maps any ``EncFreeError`` to exit code 1.
"""


class EncFreeError(Exception):
    """Base class for domain and contract failures."""

    kind = "error"


class ShapeError(EncFreeError):
    kind = "dimension"


class NumericError(EncFreeError):
    kind = "numeric"


class ContractError(EncFreeError):
    kind = "contract"


class StructureError(EncFreeError):
    kind = "structure"


class InputError(EncFreeError):
    kind = "input"


class CapacityError(EncFreeError):
    kind = "capacity"


class FormatError(EncFreeError):
    kind = "format"
