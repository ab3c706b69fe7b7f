"""Exception hierarchy shared by every module."""


class ProfeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ProfeError, ValueError):
    """Shapes or widths that do not line up."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class ParameterError(ProfeError, ValueError):
    """A scalar hyperparameter outside its admissible range."""


class DataError(ProfeError, ValueError):
    """Input data that violates a contract (labels out of range, NaN, empty sets)."""


class StateError(ProfeError, RuntimeError):
    """An operation invoked in the wrong lifecycle state."""


class ConfigError(ProfeError, ValueError):
    """Invalid experiment configuration."""


class PartitionError(ProfeError, ValueError):
    """A data partition that cannot satisfy coverage requirements."""


class FormatError(ProfeError, ValueError):
    """Malformed on-disk dataset file."""

    def __init__(self, msg: str, offset: int | None = None):
        if offset is not None:
            msg = f"{msg} (at byte offset {offset})"
        super().__init__(msg)
        self.offset = offset


class ProtocolError(ProfeError, ValueError):
    """Malformed or inconsistent wire message."""

    def __init__(self, msg: str, offset: int | None = None):
        if offset is not None:
            msg = f"{msg} (at byte offset {offset})"
        super().__init__(msg)
        self.offset = offset


class MagicError(ProtocolError):
    pass


class VersionError(ProtocolError):
    pass


class TruncationError(ProtocolError):
    pass
