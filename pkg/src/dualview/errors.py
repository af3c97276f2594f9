"""Exception hierarchy shared across the library."""


class DualViewError(Exception):
    """Base class for all library errors."""

    code = 1


class ShapeMismatch(DualViewError):
    """Tensor shapes do not satisfy an operation's contract."""


class SingularIntrinsics(DualViewError):
    """Camera intrinsics are not invertible (fx or fy is zero)."""


class BehindCamera(DualViewError):
    """Point projects behind the image plane."""


class ContextMismatch(DualViewError):
    """Backward pass called with a context from a different forward call."""


class PlacementFailure(DualViewError):
    """Box placement rejection sampling exhausted its attempt budget."""


class EmptyMask(DualViewError):
    """Depth loss requested with no supervised pixel."""


class DivergenceDetected(DualViewError):
    """Training loss became NaN or Inf."""


class IoError(DualViewError):
    """File could not be read or written."""

    code = 3


class VersionMismatch(IoError):
    """Container file has an unsupported format version."""


class CorruptRecord(IoError):
    """Container record failed its checksum or is truncated."""
