"""Exception hierarchy.

Errors are split by what the CLI should do with them: data problems map to
exit code 1, numerical failures to exit code 2, configuration errors to 3.
"""

from __future__ import annotations


class PanelFGLSError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class DataError(PanelFGLSError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 1


class UnbalancedPanelError(DataError):
    def __init__(self, missing: list[tuple[str, str]], n_missing: int | None = None):
        self.missing = list(missing)[:10]
        self.n_missing = len(missing) if n_missing is None else n_missing
        pairs = ", ".join(f"({u}, {t})" for u, t in self.missing)
        super().__init__(
            f"unbalanced panel: {self.n_missing} missing (unit, time) pair(s); first: {pairs}"
        )


class ConfigError(PanelFGLSError, ValueError):
    """Invalid configuration or option combination."""

    exit_code = 3


class NumericalError(PanelFGLSError, ArithmeticError):
    """A numerical stage failed (singular design, non-convergence, ...)."""

    exit_code = 2


class SingularMatrixError(NumericalError):
    pass


class NotPositiveDefiniteError(NumericalError):
    """Cholesky hit a non-positive pivot.

    ``row`` is the zero-based index of the failing pivot in the scalar
    (NT x NT) ordering.  ``c_estimate`` is filled in when the failure comes
    out of covariance estimation and a PD lower bound is known.
    """

    def __init__(self, row: int, message: str | None = None, c_estimate: float | None = None):
        self.row = row
        self.c_estimate = c_estimate
        msg = message or f"matrix is not positive definite (pivot {row} non-positive)"
        if c_estimate is not None:
            msg += f"; estimated PD lower bound c = {c_estimate:.4g}"
        super().__init__(msg)


class EmptyIntervalError(NumericalError):
    """The admissible threshold interval (c, C_bar] is empty."""

    def __init__(self, c: float, c_bar: float):
        self.c = c
        self.c_bar = c_bar
        super().__init__(
            f"no admissible threshold constant: PD lower bound c = {c:.4g} exceeds "
            f"diagonalizing bound C_bar = {c_bar:.4g}; try a larger L or a different kernel"
        )


class StageError(PanelFGLSError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: PanelFGLSError):
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code
        super().__init__(f"[{stage}] {cause}")
