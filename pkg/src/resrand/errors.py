"""Exception types raised across the package."""


class ResRandError(Exception):
    """Base class for all package errors."""


class InputError(ResRandError):
    """Malformed user input (bad files, bad flags, inconsistent shapes)."""


class NumericalError(ResRandError):
    """A computation could not be carried out reliably."""


class SingularDesign(NumericalError):
    pass


class DegenerateConstraint(NumericalError):
    pass


class NoConvergence(NumericalError):
    def __init__(self, message, kkt_gap=None):
        super().__init__(message)
        self.kkt_gap = kkt_gap


class LayoutMismatch(InputError):
    pass


class GroupTooLarge(InputError):
    pass


class EmptyInput(InputError):
    pass


class IndivisibleDesign(InputError):
    def __init__(self, message, remainders=None):
        super().__init__(message)
        self.remainders = remainders


class MissingColumn(InputError):
    def __init__(self, column):
        super().__init__(f"missing required column {column!r}")
        self.column = column


class NonNumericCell(InputError):
    def __init__(self, row, column, value):
        super().__init__(f"non-numeric value {value!r} in row {row}, column {column!r}")
        self.row = row
        self.column = column


class RaggedRow(InputError):
    def __init__(self, row, expected, found):
        super().__init__(f"row {row} has {found} fields, expected {expected}")
        self.row = row


class NotSimilarWarning(UserWarning):
    """Cluster Gram matrices are not proportional; the test is not exact."""
