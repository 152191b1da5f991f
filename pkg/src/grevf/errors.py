"""Exception hierarchy shared across the package."""

from __future__ import annotations

import numpy as np


class GrevfError(Exception):
    """Base class for every error raised by grevf."""

    category = "error"


class DomainError(GrevfError, ValueError):
    category = "domain"


class ShapeError(GrevfError, ValueError):
    category = "shape"


class NumericError(GrevfError, ArithmeticError):
    category = "numeric"


class NotPositiveDefiniteError(GrevfError, np.linalg.LinAlgError):
    """Cholesky failed even at the largest jitter of the schedule."""

    category = "not-positive-definite"

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


class CapacityError(GrevfError, ValueError):
    category = "capacity"


class RankError(GrevfError, ArithmeticError):
    category = "rank"


class DivergenceError(NumericError):
    """ELBO became non-finite during optimisation."""

    category = "divergence"

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
