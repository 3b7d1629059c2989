import numpy as np


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class FactorizationError(np.linalg.LinAlgError):
    """A covariance matrix could not be factorized as requested."""


class ConvergenceWarning(UserWarning):
    pass
