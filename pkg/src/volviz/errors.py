"""Exception hierarchy shared across the package."""


class VolvizError(Exception):
    """Base class for all package errors."""


class ShapeError(VolvizError, ValueError):
    """Tensor or volume shapes are incompatible."""


class TapeError(VolvizError, RuntimeError):
    """Misuse of the backward tape (non-scalar output, double backward)."""


class DataError(VolvizError):
    """Bad or missing input data; the CLI maps this to exit code 2."""


class VolumeFormatError(DataError):
    """A volume header or data file is malformed."""

    def __init__(self, path, field, message):
        self.path = str(path)
        self.field = field
        super().__init__(f"{path}: field '{field}': {message}")


class VolumeLengthError(VolumeFormatError):
    """Data file size disagrees with the header."""


class UnknownDtypeError(VolumeFormatError):
    """Header names a dtype outside the supported set."""


class WeightsFormatError(DataError):
    """Weights file has bad magic bytes or an unreadable header."""


class WeightsVersionError(WeightsFormatError):
    """Weights file was written by an incompatible format version."""


class WeightsTruncatedError(WeightsFormatError):
    """Weights file ends before all parameter blobs are read."""


class WeightsShapeError(DataError, ShapeError):
    """Stored parameter shapes disagree with the target model config."""
