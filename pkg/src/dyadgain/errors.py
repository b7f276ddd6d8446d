"""Error types shared across the package."""


class DyadgainError(Exception):
    """Base class for all package-specific failures."""


class IllConditionedGramError(DyadgainError):
    """Gramian could not be factorized even at the largest allowed jitter."""


class OptimizationFailureError(DyadgainError):
    """No hyperparameter start converged; carries the best point found."""

    def __init__(self, message, best_hyper=None, best_value=None):
        super().__init__(message)
        self.best_hyper = best_hyper
        self.best_value = best_value


class SchemaError(DyadgainError):
    """Input file violates the documented schema.

    Carries enough context (file, line) to point at the offending row.
    """

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + loc)
        self.path = path
        self.line = line


class NoCrossingError(DyadgainError):
    """Neither car ever satisfies the required circle-crossing condition."""


class UnstablePolicyError(DyadgainError):
    """Simulated closed loop diverged (speed above the hard limit)."""


class InfeasibleProblemError(DyadgainError):
    """Trajectory optimization problem has no solution under the constraints."""


class TooFewSamplesError(DyadgainError):
    """Dataset is too small for the requested operation."""
