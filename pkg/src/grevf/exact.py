"""Exact regression with noisy point observations and arbitrary prediction functionals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .features import Dirac, DualElement, FeatureSet
from .kernels import Kernel, check_in_domain
from .numerics import CholFactor, QuadratureRule, cholesky_jittered, log_det, psd_solve, symmetrize, tri_solve

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``y_n = F(x_n) + noise`` with noise variance ``noise_variance``."""

    X: np.ndarray
    y: np.ndarray
    noise_variance: float
    domain: Optional[tuple] = None

    def __post_init__(self):
        X = np.atleast_1d(np.asarray(self.X, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if X.ndim != 1 or X.shape != y.shape:
            raise ValueError(f"X and y must be 1-D of equal length, got {X.shape} and {y.shape}")
        if X.size == 0:
            raise ValueError("no observations")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets contain non-finite values")
        if not (np.isfinite(self.noise_variance) and self.noise_variance > 0):
            raise ValueError(f"noise variance must be positive, got {self.noise_variance}")
        check_in_domain(X, self.domain)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    @property
    def N(self) -> int:
        return self.X.size

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.noise_variance, self.domain)


def data_features(ds: Dataset, k: Kernel) -> FeatureSet:
    """Point-evaluation functionals at the observed inputs."""
    return FeatureSet([Dirac(x) for x in ds.X], k, domain=ds.domain)


def as_feature_set(T, k: Kernel, rule: Optional[QuadratureRule] = None, domain=None) -> FeatureSet:
    if isinstance(T, FeatureSet):
        return T
    if domain is None and rule is not None:
        domain = rule.domain
    return FeatureSet(list(T), k, rule, domain=domain)


@dataclass(frozen=True, eq=False)
class ExactPosterior:
    dataset: Dataset
    kernel: Kernel
    factor: CholFactor
    alpha: np.ndarray


def fit_exact(ds: Dataset, k: Kernel) -> ExactPosterior:
    """Factor ``C_DD + sigma^2 I`` and store ``alpha = (C_DD + sigma^2 I)^{-1} y``."""
    C_DD = data_features(ds, k).gram
    factor = cholesky_jittered(C_DD + ds.noise_variance * np.eye(ds.N))
    return ExactPosterior(ds, k, factor, psd_solve(factor, ds.y))


def predict_exact(
    post: ExactPosterior,
    T: Sequence[DualElement] | FeatureSet,
    rule: Optional[QuadratureRule] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean vector and covariance matrix of the functionals ``T``."""
    ds = post.dataset
    tfs = as_feature_set(T, post.kernel, rule, ds.domain)
    C_TD = tfs.cross(ds.X)
    mean = C_TD @ post.alpha
    V = tri_solve(post.factor, C_TD.T)
    cov = symmetrize(tfs.gram - V.T @ V)
    return mean, cov


def predict_exact_points(post: ExactPosterior, X) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise posterior mean and variance at ``X``."""
    X = check_in_domain(X, post.dataset.domain)
    mean, cov = predict_exact(post, [Dirac(x) for x in X])
    return mean, np.diag(cov).copy()


def log_marginal(ds: Dataset, k: Kernel) -> float:
    """``log N(y | 0, C_DD + sigma^2 I)``."""
    post = fit_exact(ds, k)
    return log_marginal_from(post)


def log_marginal_from(post: ExactPosterior) -> float:
    y = post.dataset.y
    return -0.5 * (float(y @ post.alpha) + log_det(post.factor) + y.size * LOG_2PI)

