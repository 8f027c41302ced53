"""Exception hierarchy shared by all clbench modules."""


class ClbenchError(Exception):
    """Base class for every error raised by clbench."""


class ConfigurationError(ClbenchError, ValueError):
    """A caller-supplied configuration is inconsistent or incomplete."""


class InvalidCoordinateError(ClbenchError, ValueError):
    pass


class InvalidResolutionError(ClbenchError, ValueError):
    pass


class EmptyRegionError(ClbenchError, ValueError):
    pass


class ContainerError(ClbenchError):
    """Base for on-disk container failures."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class HeaderParseError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class DimensionMismatchError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class InvariantError(ClbenchError, ValueError):
    """A data object violates one of its structural invariants."""


class DegenerateChannelError(ClbenchError, ValueError):
    def __init__(self, channel):
        super().__init__(f"channel {channel!r} has zero variance in the training split")
        self.channel = channel


class ChannelMismatchError(ClbenchError, ValueError):
    pass


class EmptySplitError(ClbenchError, ValueError):
    pass


class OverlappingSplitError(ClbenchError, ValueError):
    pass


class EmptySampleSetError(ClbenchError, ValueError):
    pass


class InsufficientHistoryError(ClbenchError, ValueError):
    pass


class UndefinedMetricError(ClbenchError, ArithmeticError):
    """The metric is mathematically undefined for the given inputs.

    The harness catches this and records the cell with ``defined=False``
    instead of emitting a NaN.
    """


class AlignmentError(ClbenchError, ValueError):
    pass


class RolloutIncompatibleError(ClbenchError, ValueError):
    pass
