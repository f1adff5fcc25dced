"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: InputError -> 1, SolverError -> 2,
OSError and friends -> 3.
"""


class LemsimError(Exception):
    """Base class for all package errors."""


class InputError(LemsimError):
    """Invalid network, configuration, bid, or time-series input."""


class SolverError(LemsimError):
    """Power flow or optimization failed to converge / is infeasible.

    Carries optional diagnostics (residual traces, iteration counts).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
