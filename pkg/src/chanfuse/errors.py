class ChanfuseError(Exception):
    """Base class for data errors raised by this package."""


class DataError(ChanfuseError):
    """Input data is malformed, too short, or inconsistent in shape."""


class FormatError(DataError):
    """A binary container or text file could not be parsed."""
