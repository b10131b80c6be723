"""Exception hierarchy shared by every stage of the pipeline.

Each error class carries the process exit code the CLI maps it to.
"""


class OwtcError(Exception):
    exit_code = 1


class ValidationError(OwtcError, ValueError):
    """Bad arguments, broken preconditions, label or shape mismatches."""

    exit_code = 2


class DimensionError(ValidationError):
    pass


class FormatError(OwtcError):
    """A file on disk could not be decoded."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    pass


class PartialReadError(FormatError):
    def __init__(self, message, record_index, offset=None):
        super().__init__(f"{message} (record {record_index})", offset)
        self.record_index = record_index


class NumericError(OwtcError, ArithmeticError):
    """NaN or Inf appeared where finite values are required."""

    exit_code = 4


class EmptyPayloadError(ValidationError):
    pass


class CannotTrainError(ValidationError):
    pass


class NothingToLabelError(ValidationError):
    pass
