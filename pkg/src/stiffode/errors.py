"""Exception hierarchy shared by all modules."""


class StiffOdeError(Exception):
    """Base class for library errors."""


class DimensionMismatch(StiffOdeError, ValueError):
    pass


class SingularMatrix(StiffOdeError, ArithmeticError):
    """A pivot fell below the relative singularity threshold."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class NonFiniteEvaluation(StiffOdeError, FloatingPointError):
    pass


class NewtonDiverged(StiffOdeError):
    """Newton iteration failed; the caller should reduce the step size."""

    def __init__(self, message, residual_norm=float("nan"), indices=None, interval=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.indices = indices
        self.interval = interval


class NotConverged(StiffOdeError):
    pass


class EmptyChain(StiffOdeError, ValueError):
    pass


class EmptyTrajectory(StiffOdeError, ValueError):
    pass


class InvalidConfig(StiffOdeError, ValueError):
    pass


class UnknownProblem(StiffOdeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown problem"


class InvalidBounds(StiffOdeError, ValueError):
    pass


class InvalidStudy(StiffOdeError, ValueError):
    pass
