"""Exception hierarchy shared by every module.

The CLI maps any :class:`XSegError` to exit code 1 with a one-line message.
"""


class XSegError(Exception):
    """Base class for all library errors."""


class ShapeError(XSegError, ValueError):
    """Tensor or array shapes are incompatible.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class TapeError(XSegError):
    """A tensor was not recorded on the tape that is being differentiated."""


class UnsupportedOpError(XSegError):
    """An attribution rule was requested for an op it cannot handle."""


class ConfigError(XSegError, ValueError):
    """Invalid model, training or run configuration."""


class FormatError(XSegError):
    """A binary container is malformed (bad magic, bad header)."""


class VersionError(FormatError):
    """A binary container was written with an unsupported format version."""


class TruncatedFileError(FormatError):
    """A binary container ends before its declared payload does."""


class WeightShapeError(FormatError):
    """A stored weight does not match the shape the config expects."""

    def __init__(self, name, expected, found):
        super().__init__(f"weight {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.name = name


class RLEError(XSegError, ValueError):
    """Malformed run-length encoded mask."""


class OddTokenCountError(RLEError):
    pass


class OverlappingRunsError(RLEError):
    pass


class RunOutOfRangeError(RLEError):
    pass


class DataError(XSegError):
    """Slice stacks or manifests that cannot be assembled into a volume."""


class TrainingDivergedError(XSegError):
    """The loss or a gradient became NaN/Inf."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class AttributionError(XSegError, ValueError):
    """Invalid attribution request: empty or out-of-range pixel set, unknown
    layer, overlapping probe sets or a stochastic (training-mode) graph."""
