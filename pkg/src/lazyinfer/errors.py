"""Exception types shared across the runtime."""


class LazyInferError(Exception):
    """Base class for all runtime errors."""


class ShapeError(LazyInferError):
    """Operand shapes are inconsistent."""


class ConfigError(LazyInferError):
    """Invalid model, schedule, or command configuration."""


class InputError(LazyInferError):
    """Caller-provided data violates a precondition."""


class DegenerateRowError(LazyInferError):
    """A softmax or attention row has no visible entries."""


class WeightFormatError(LazyInferError):
    """Weight file is malformed, truncated, or corrupt."""


class MissingKvError(LazyInferError):
    """Requested KV rows are not cached at this layer; revival is required."""


class MissingAuxError(LazyInferError):
    """No aux entry exists for the requested (layer, token)."""


class InvariantViolation(LazyInferError):
    """A cache or ledger contract was broken; this is a bug, abort loudly."""
