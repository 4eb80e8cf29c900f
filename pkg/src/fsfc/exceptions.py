"""Exception hierarchy shared by the solver, the pipeline and the CLI."""


class FsfcError(Exception):
    """Base class for all errors raised by :mod:`fsfc`."""

    code = "FSFC_ERROR"


class ConfigError(FsfcError, ValueError):
    code = "CONFIG_INVALID"


class DataError(FsfcError, ValueError):
    code = "DATA_INVALID"


class DualInfeasibleError(FsfcError, ValueError):
    """A dual iterate left the domain ``Y_i V_i in (-1, 0)``."""

    code = "DUAL_INFEASIBLE"


class NewtonSystemSingular(FsfcError, ArithmeticError):
    code = "NEWTON_SINGULAR"


class LineSearchStalled(FsfcError, RuntimeError):
    """Backtracking exhausted its halvings without satisfying Armijo."""

    code = "LINE_SEARCH_STALLED"

    def __init__(self, message, *, step=None, psi0=None, slope=None):
        super().__init__(message)
        self.step = step
        self.psi0 = psi0
        self.slope = slope


class ModelFormatError(FsfcError, ValueError):
    code = "MODEL_INVALID"
