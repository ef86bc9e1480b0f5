"""Exception hierarchy shared by every latentpinn module."""


class LatentPinnError(Exception):
    """Base class for all package errors."""


class ValidationError(LatentPinnError, ValueError):
    """Inputs violate a documented precondition or invariant."""


class FormatError(LatentPinnError, ValueError):
    """A container file is malformed."""


class LengthMismatchError(FormatError):
    """Header-declared payload size disagrees with the bytes on disk."""


class RangeError(LatentPinnError, ValueError):
    """A query falls outside the domain of a field."""


class GenerationError(LatentPinnError, RuntimeError):
    """A random sample was degenerate and must be redrawn."""


class TrainingError(LatentPinnError, RuntimeError):
    """Optimization produced non-finite values."""


class CapabilityError(LatentPinnError, NotImplementedError):
    """A requested differentiable primitive is not supported."""
