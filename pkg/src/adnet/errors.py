"""Exception hierarchy shared by every subsystem.

Each class carries a ``category`` string; the CLI prints it as the first token
of its single-line error report so callers can dispatch on it.
"""


class ADNetError(Exception):
    category = "error"


class DimensionError(ADNetError, ValueError):
    category = "dimension"


class ParameterError(ADNetError, ValueError):
    category = "parameter"


class ContractError(ADNetError, ValueError):
    category = "contract"


class PropagationError(ADNetError, FloatingPointError):
    """Raised when a NaN would be propagated through a numerically guarded op."""

    category = "propagation"


class FormatError(ADNetError):
    """Malformed or truncated file. ``offset`` is the byte position of the fault."""

    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleError(ADNetError):
    """Checkpoint version or configuration does not match what the caller expects."""

    category = "incompatible"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class CalibrationError(ADNetError):
    category = "calibration"


class CapacityError(ADNetError, ValueError):
    category = "capacity"

    def __init__(self, message, limit=None):
        super().__init__(message)
        self.limit = limit


class BackendUnavailableError(ADNetError, EnvironmentError):
    """A required external tool (decoder executable, encoder package) is missing."""

    category = "environment"


class ManifestError(ADNetError):
    category = "manifest"

    def __init__(self, message, paths=()):
        if paths:
            message = f"{message}: {', '.join(str(p) for p in paths)}"
        super().__init__(message)
        self.paths = list(paths)


class TrainingDivergedError(ADNetError):
    category = "diverged"

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
