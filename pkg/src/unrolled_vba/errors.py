"""Exception types shared across the package."""

import numpy as np


class NumericalFailure(ArithmeticError):
    """A solver produced non-finite values or an impossible quantity."""


class SingularPriorError(np.linalg.LinAlgError):
    """The kernel prior matrix does not have full column rank."""


class SingularPosteriorError(np.linalg.LinAlgError):
    """The kernel posterior precision is not positive definite."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss.

    The partial training curves are kept on ``curves``.
    """

    def __init__(self, message, curves=None):
        super().__init__(message)
        self.curves = curves if curves is not None else {}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""
