"""Exception and warning types shared across the package."""


class ScreencalError(Exception):
    """Base class for all package errors."""


class ValidationError(ScreencalError, ValueError):
    """Input data violates a type invariant.

    ``record_id`` and ``field`` name the offending record and column when known.
    """

    def __init__(self, message, record_id=None, field=None):
        self.record_id = record_id
        self.field = field
        where = []
        if record_id is not None:
            where.append(f"id={record_id!r}")
        if field is not None:
            where.append(f"field={field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DimensionMismatch(ScreencalError, ValueError):
    pass


class AlignmentError(ScreencalError, ValueError):
    """Two collections that must share subject ids do not."""


class NumericalError(ScreencalError, ArithmeticError):
    """Base class for failures of a numerical routine."""


class NonConvergence(NumericalError):
    pass


class PositivityViolation(NumericalError):
    """A censoring-survival evaluation needed for a weight is zero."""


class EmptySelection(NumericalError):
    """The rule selects no calibration subject, so the risk ratio is undefined."""


class CurveRangeError(ScreencalError, ValueError):
    """A curve is evaluated beyond its grid while extrapolation is disabled."""


class InsufficientData(ScreencalError, ValueError):
    pass


class ConfigError(ScreencalError, ValueError):
    def __init__(self, key, reason="missing"):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")


class DegenerateDesign(UserWarning):
    """A covariate column is constant; its coefficient is pinned to zero."""
