"""Exception types shared across the package.

Everything raises subclasses of CuriosceneError so callers (and the CLI)
can distinguish our failures from genuine bugs.
"""


class CuriosceneError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CuriosceneError):
    """Operands have incompatible shapes."""


class NumericError(CuriosceneError):
    """A computation produced NaN/Inf, or attempted division by zero."""


class NotScalar(CuriosceneError):
    """Backward was requested from a non-scalar tensor."""


class InvalidConfig(CuriosceneError):
    """A config value is missing, malformed, or out of range."""


class CountMismatch(CuriosceneError):
    """Predicted and true scenes disagree on object count where equality is required."""


class CapabilityError(CuriosceneError):
    """Ground-truth labels were accessed without an explicit capability token."""


class RejectionExhausted(CuriosceneError):
    """Rejection sampling failed to produce a valid scene within the attempt budget."""


class BehindCamera(CuriosceneError):
    """An object center projects behind the camera plane."""


class FormatError(CuriosceneError):
    """A file on disk does not match the expected binary/text format."""


class TopologyMismatch(CuriosceneError):
    """A checkpoint's parameter names/shapes do not match the model being restored."""
