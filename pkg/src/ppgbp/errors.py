"""Exception types raised across the pipeline."""


class PPGBPError(Exception):
    """Base class for all errors raised by ppgbp."""


class InvalidSignalError(PPGBPError, ValueError):
    pass


class InvalidSpecError(PPGBPError, ValueError):
    pass


class EmptyRecordError(PPGBPError, ValueError):
    pass


class DegenerateWindowError(PPGBPError, ValueError):
    """Window has (numerically) zero variance, e.g. a flatlined sensor."""


class ShapeError(PPGBPError, ValueError):
    pass


class NumericError(PPGBPError, ArithmeticError):
    """Non-finite value produced during a computation.

    ``where`` names the parameter or time step that went bad.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class UninitializedStatsError(PPGBPError, RuntimeError):
    pass


class ProtocolError(PPGBPError, RuntimeError):
    pass


class InsufficientDataError(PPGBPError, ValueError):
    pass


class EmptyInputError(PPGBPError, ValueError):
    pass


class IngestionError(PPGBPError, ValueError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class AlignmentWarning(UserWarning):
    pass
