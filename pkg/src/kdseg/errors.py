"""Exception hierarchy shared by every kdseg module."""


class KdsegError(Exception):
    """Base class for all errors raised by kdseg."""


class ShapeError(KdsegError, ValueError):
    pass


class ParameterError(KdsegError, ValueError):
    pass


class DataError(KdsegError, ValueError):
    pass


class ScenarioError(KdsegError, ValueError):
    pass


class ReportError(KdsegError, ValueError):
    pass


class CheckpointError(KdsegError, IOError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
