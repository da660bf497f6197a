"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code (see :mod:`docfusion.cli`).
"""


class DocfusionError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class ShapeError(DocfusionError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""

    exit_code = 3


class ContractError(DocfusionError, ValueError):
    """A documented precondition of an operation was violated."""

    exit_code = 3


class InputError(DocfusionError, ValueError):
    """Bad user-supplied data: out-of-range index, missing file content, etc."""

    exit_code = 3


class ConfigError(DocfusionError, ValueError):
    """Inconsistent or unknown configuration."""

    exit_code = 3


class ParseError(DocfusionError, ValueError):
    """A context-spec string could not be parsed.

    ``position`` is the 0-based character offset of the offending token.
    """

    exit_code = 3

    def __init__(self, message: str, text: str, position: int):
        self.text = text
        self.position = position
        pointer = " " * position + "^"
        super().__init__(f"{message} at position {position}\n  {text}\n  {pointer}")
