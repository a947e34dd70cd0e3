"""Exception types shared across the package."""


class MMForgeError(Exception):
    """Base class for all structured errors raised by this package."""


class ShapeError(MMForgeError):
    """Tensor shape, axis, or head-split mismatch."""


class DegenerateInputError(MMForgeError):
    """Input is structurally valid but degenerate for the requested op
    (zero-norm vector, empty contrastive pool, single-class batch, ...)."""


class NonFiniteError(MMForgeError):
    """A value that must be finite is NaN or infinite."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class DataFormatError(MMForgeError):
    """Malformed or invariant-violating dataset record."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(MMForgeError):
    """Bad config file: unknown key, missing key, or unparsable value."""


class CheckpointError(MMForgeError):
    """Checkpoint cannot be loaded (schema mismatch, corrupt payload)."""
