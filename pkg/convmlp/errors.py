"""Errors module."""


class Error(Exception):
    """Base error."""


class DimensionError(Error):
    """Tensor shapes or channel counts do not agree."""


class GeometryError(Error):
    """Kernel, stride, padding or input extents give an invalid output."""


class ParameterError(Error):
    """Hyper-parameter is out of its valid range."""


class DataError(Error):
    """Dataset contents are invalid (labels, images)."""


class FormatError(Error):
    """Binary or text file does not follow its documented layout."""

    def __init__(self, message, offset=None):
        """Initializer."""
        if offset is not None:
            message = '{0} (at byte offset {1})'.format(message, offset)
        super(FormatError, self).__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    """File ended before all declared bytes were read."""


class ChecksumError(FormatError):
    """Stored CRC-32 does not match file contents."""


class VersionError(FormatError):
    """Unknown file format version."""


class NameMismatchError(FormatError):
    """Stored tensor name or shape does not match the model."""


class ConfigError(Error):
    """Configuration text or values are invalid."""

    def __init__(self, message, line=None, field=None):
        """Initializer."""
        if line is not None:
            message = 'line {0}: {1}'.format(line, message)
        super(ConfigError, self).__init__(message)
        self.line = line
        self.field = field


class ConfigMismatchError(Error):
    """Embedded configuration differs from the expected one."""

    def __init__(self, field, expected, found):
        """Initializer."""
        super(ConfigMismatchError, self).__init__(
            'config mismatch in "{0}": expected {1!r}, found {2!r}'.format(
                field, expected, found))
        self.field = field


class ConsistencyError(Error):
    """Optimizer state and parameter registry drifted apart."""


class UsageError(Error):
    """Command line is malformed."""


class NumericalCheckError(Error):
    """Numerical self-check or calibration target failed."""
