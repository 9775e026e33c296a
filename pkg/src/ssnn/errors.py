"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class ShapeError(ContractViolation):
    """Operand shapes do not conform."""


class ResourceError(RuntimeError):
    """An exact computation would exceed its size guard."""


class NonDeterminismError(RuntimeError):
    """A function expected to be deterministic returned different values."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class DatasetParseError(ValueError):
    """A dataset file could not be parsed; the message names the location."""


class SchemaError(ValueError):
    """A dataset or checkpoint is well-formed but structurally inconsistent."""


class UsageError(ValueError):
    """Bad command-line usage or unknown configuration key."""
