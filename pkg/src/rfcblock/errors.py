"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: validation problems exit 1, numeric
failures exit 2 and I/O failures exit 3.
"""


class RFCError(Exception):
    """Base class for all library errors."""


class ValidationError(RFCError, ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Operand shapes are incompatible."""


class MiningError(ValidationError):
    """A batch cannot provide hardest positives/negatives."""


class UnsupportedSequenceError(ValidationError):
    """Temporal completion was requested on a single-frame input."""


class EvaluationError(ValidationError):
    """No query could be scored."""


class NumericError(RFCError, ArithmeticError):
    """A non-finite or degenerate value appeared where it is not allowed."""


class DegenerateColumnError(NumericError):
    """Column normalization met a column with zero sum."""


class DegenerateRegionError(NumericError):
    """A non-empty region has vanishing pooling weight."""


class RFCTFormatError(RFCError, OSError):
    """A tensor file is malformed."""
