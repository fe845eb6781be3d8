"""Exception hierarchy shared across the package.

Three top-level categories map onto the CLI exit-code contract:
usage problems (exit 1, plain ValueError or argparse), data problems
(exit 2, DataError), numerical failures (exit 3, NumericalError).
"""


class HazevoxError(Exception):
    """Base class for all package-specific errors."""


class DataError(HazevoxError):
    """Malformed, missing, or inconsistent input data."""


class BadMagicError(DataError):
    """Grid file does not start with the expected magic bytes."""


class TruncatedGridError(DataError):
    """Grid file ends before the declared payload is complete."""


class DimsMismatchError(DataError):
    """Grid header dims are invalid or disagree with the payload size."""


class MissingViewFileError(DataError):
    """Dataset manifest references an image file that does not exist."""

    def __init__(self, view_index: int, path: str):
        self.view_index = view_index
        self.path = path
        super().__init__(f"view {view_index}: missing image file {path!r}")


class CorruptGridError(DataError):
    """Non-finite values encountered while sampling a grid."""


class InsufficientViewsError(DataError):
    """Fewer views than the operation can work with."""


class NumericalError(HazevoxError):
    """An optimization or numerical routine failed to produce finite results."""

    def __init__(self, message: str, last_checkpoint=None):
        self.last_checkpoint = last_checkpoint
        super().__init__(message)


class PipelineError(HazevoxError):
    """A multi-stage pipeline aborted; carries the failing stage name."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"pipeline stage {stage!r} failed: {cause}")
