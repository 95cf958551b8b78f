"""Exception hierarchy shared across the laboratory.

The CLI maps these onto exit codes: configuration problems -> 2,
numeric failures -> 3, statistical-acceptance failures -> 4.
"""


class RmtlabError(Exception):
    """Base class for all rmtlab errors."""


class ParameterError(RmtlabError):
    """A contract violation on user-supplied parameters."""


class ConfigError(RmtlabError):
    """An experiment configuration failed schema validation."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ConvergenceError(RmtlabError):
    """An iterative solver missed its residual target.

    Carries the last residual and the iteration count at failure.
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class EigensolverError(RmtlabError):
    """The dense eigensolver failed; carries the LAPACK info code."""

    def __init__(self, message, info=None):
        super().__init__(message)
        self.info = info


class SamplingError(RmtlabError):
    """A rejection sampler exhausted its attempt budget."""

    def __init__(self, message, attempts=None):
        super().__init__(message)
        self.attempts = attempts


class CollisionError(RmtlabError):
    """Eigenvalue trajectories got too close for the SDE integrator."""

    def __init__(self, message, step=None, min_gap=None):
        super().__init__(message)
        self.step = step
        self.min_gap = min_gap


class StepSizeError(RmtlabError):
    """A requested step size violates an integrator stability bound."""


class StatisticalFailure(RmtlabError):
    """A statistical acceptance criterion failed at its stated tolerance."""
