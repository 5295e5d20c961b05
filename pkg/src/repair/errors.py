"""Exception types shared across the package."""


class RepairError(Exception):
    """Base class for all library errors."""


class ParameterError(RepairError, ValueError):
    """An argument is outside its documented range or shape."""


class FormatError(RepairError, ValueError):
    """A binary container or config file is malformed; the message names the field."""


class DegenerateInputError(RepairError, ValueError):
    """An input projects to the zero vector and cannot be normalized."""


class InsufficientNegativesError(RepairError, ValueError):
    """A batch is too small to provide in-batch negatives (needs >= 2 pairs)."""


class EmptyBankError(RepairError, RuntimeError):
    """A distance query was issued against an empty memory bank."""


class UndefinedCorrelationError(RepairError, ArithmeticError):
    """A rank vector has zero variance, so the correlation is undefined."""


class DegenerateFitError(RepairError, RuntimeError):
    """Mixture fitting is impossible (fewer than two distinct values)."""


class UndefinedAucError(RepairError, RuntimeError):
    """AUC requested with an empty clean or noisy population."""
