"""Exception types shared across the toolkit.

Plain invalid arguments raise :class:`ValueError`; the classes below exist
where callers need to carry structured diagnostic data or distinguish
failure modes programmatically.
"""


class QsylvError(Exception):
    """Base class for toolkit-specific failures."""


class SingularMatrixError(QsylvError):
    """An exactly singular pivot was hit during a factorization.

    ``pivot_index`` is the zero-based index of the offending pivot when the
    factorization makes it identifiable, else ``None``.
    """

    def __init__(self, message, pivot_index=None):
        super().__init__(message)
        self.pivot_index = pivot_index


class SingularPencilError(QsylvError):
    """An eigenvalue sum lambda_i + mu_j of the Sylvester pencil is (numerically) zero."""


class ConvergenceError(QsylvError):
    """An iteration hit its step limit before reaching the requested accuracy.

    ``last_increment`` carries the final stopping-criterion value;
    ``history`` an optional per-step record (e.g. CG residual norms).
    """

    def __init__(self, message, last_increment=None, history=None):
        super().__init__(message)
        self.last_increment = last_increment
        self.history = history


class DivergenceError(QsylvError):
    """A series iteration grew for several consecutive steps (spectral radius >= 1)."""


class NumericalError(QsylvError):
    """A numerically impossible state was reached (e.g. singular scaled denominator)."""


class FormatError(QsylvError):
    """Malformed serialized data. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class UndefinedResidualError(QsylvError):
    """The residual metric is undefined (zero solution norm)."""
