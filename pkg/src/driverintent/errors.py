"""Exception types shared across the package."""


class ContractError(ValueError):
    """A call violated an operation's stated preconditions."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class IndexRangeError(IndexError):
    """A row or element selection fell outside the tensor."""


class ConfigurationError(ValueError):
    """An invalid or internally inconsistent configuration."""


class RuleParseError(ValueError):
    """A scenario-rule file failed to parse.

    Carries the 1-based line number of the offending line.
    """

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FormatError(ValueError):
    """A serialized artifact (raster, manifest, checkpoint) is malformed."""

    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = path


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite math was required."""


class StateError(RuntimeError):
    """The operation is invalid for the object's current state."""
