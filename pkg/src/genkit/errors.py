"""Exception hierarchy shared by all modules.

The CLI maps ``ValidationError`` to exit status 2 and ``EstimationError`` to
exit status 3.
"""


class GenkitError(Exception):
    """Base class for all errors raised by genkit."""


class ValidationError(GenkitError, ValueError):
    """Inputs violate a documented precondition."""


class ConfigError(ValidationError):
    """A configuration file or scenario definition is invalid."""


class PositivityError(ValidationError):
    """Target-sample moderator values are not covered by the RCT."""


class OverlapError(ValidationError):
    """A sensitivity grid extends beyond the RCT support of the moderator."""


class DegenerateInputError(ValidationError):
    """Input has too little variation for the requested construction."""


class EstimationError(GenkitError, RuntimeError):
    """A numerical fit or estimator could not be computed."""


class SingularDesignError(EstimationError):
    """Design matrix is rank deficient on the rows that carry weight."""

    def __init__(self, message, collinear=()):
        super().__init__(message)
        self.collinear = tuple(collinear)


class DegenerateWeightsError(EstimationError):
    """Weights sum to zero overall or within a required group."""


class ScenarioError(EstimationError):
    """Too many Monte Carlo iterations failed."""


class SeparationWarning(RuntimeWarning):
    """Logistic fit shows signs of (quasi-)complete separation."""


class ConvergenceWarning(RuntimeWarning):
    """Iterative fit stopped before meeting its tolerance."""


class PositivityWarning(RuntimeWarning):
    """Estimated membership probabilities are close to zero."""
