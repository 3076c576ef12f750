"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
``NumericalError`` -> 4.
"""


class AutoTransferError(Exception):
    pass


class ConfigError(AutoTransferError, ValueError):
    pass


class DataError(AutoTransferError, ValueError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class NumericalError(AutoTransferError, ArithmeticError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class DegenerateBatchError(NumericalError, ValueError):
    """All points in a batch coincide, so no kernel scale can be derived."""

    def __init__(self, message="degenerate batch"):
        super().__init__(message)
