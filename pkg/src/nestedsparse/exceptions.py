"""Exception hierarchy shared by every module of the package."""


class NestedSparseError(Exception):
    """Base class for all package errors."""


class DimensionError(NestedSparseError, ValueError):
    """Operand shapes do not line up."""

    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class GeometryError(NestedSparseError, ValueError):
    """Convolution geometry yields a non-positive output size."""


class StaleCacheError(NestedSparseError, RuntimeError):
    """A forward cache was reused after the weights it was built from changed."""


class ScheduleExhaustedError(NestedSparseError, IndexError):
    """The learning-rate schedule was queried past its last step."""


class BlockShapeError(NestedSparseError, ValueError):
    """Matrix shape is not divisible by the block shape (no padding policy)."""


class NestingError(NestedSparseError, ValueError):
    """A mask set violates support(M_{i+1}) <= support(M_i)."""


class LevelError(NestedSparseError, IndexError):
    """Requested sparsity level does not exist."""


class DivergenceError(NestedSparseError, RuntimeError):
    """Training loss became non-finite or exceeded the divergence threshold."""

    def __init__(self, message, step=None, layer=None):
        self.step = step
        self.layer = layer
        super().__init__(f"{message} (step={step}, layer={layer})")


class ConfigError(NestedSparseError, ValueError):
    """Malformed training configuration."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(NestedSparseError, ValueError):
    """Base class for binary file decoding errors."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class InvariantError(FormatError):
    """Decoded payload is structurally well formed but breaks an invariant."""

    def __init__(self, invariant, detail=""):
        self.invariant = invariant
        msg = invariant if not detail else f"{invariant}: {detail}"
        super().__init__(msg)
