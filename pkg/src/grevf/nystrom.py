"""Kernel ridge regression over the span of the feature representers.

With basis functions ``b_m(x) = Cov(L_m F, F(x))`` the estimator minimises

    J(alpha) = mean_n (y_n - sum_m alpha_m b_m(x_n))^2 + lam * alpha^T K_MM alpha

where ``K_MM`` holds the RKHS inner products of the basis functions, which
coincide with the feature covariances ``C_LL``. Likewise ``K_MX = C_LD``.
For ``lam = sigma^2 / N`` the fitted function equals the mean of the optimal
variational approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exact import Dataset
from .features import Dirac, FeatureSet
from .numerics import cholesky_jittered, psd_solve
from .variational import optimal_predict


@dataclass(frozen=True, eq=False)
class NystromModel:
    features: FeatureSet
    reg: float
    coef: np.ndarray
    objective: float


def basis_gram(fs: FeatureSet) -> np.ndarray:
    """``K_MM``: RKHS inner products of the basis functions."""
    return fs.gram


def basis_at(fs: FeatureSet, X) -> np.ndarray:
    """``K_MX``: basis functions evaluated at ``X``; shape ``(M, len(X))``."""
    return fs.cross(X)


def krr_objective(fs: FeatureSet, ds: Dataset, reg: float, coef) -> float:
    coef = np.asarray(coef, dtype=float)
    resid = ds.y - basis_at(fs, ds.X).T @ coef
    return float(np.mean(resid**2) + reg * coef @ basis_gram(fs) @ coef)


def krr_nystrom_fit(fs: FeatureSet, ds: Dataset, reg: float) -> NystromModel:
    """Minimise ``J``: ``alpha = (K_MX K_XM + N lam K_MM)^{-1} K_MX y``."""
    if not (np.isfinite(reg) and reg > 0):
        raise ValueError(f"regulariser must be positive, got {reg}")
    K_MX = basis_at(fs, ds.X)
    system = K_MX @ K_MX.T + ds.N * reg * basis_gram(fs)
    coef = psd_solve(cholesky_jittered(system), K_MX @ ds.y)
    return NystromModel(fs, float(reg), coef, krr_objective(fs, ds, reg, coef))


def krr_predict(model: NystromModel, Xstar) -> np.ndarray:
    """``f(x) = sum_m alpha_m b_m(x)``."""
    return basis_at(model.features, Xstar).T @ model.coef


def equivalence_gap(fs: FeatureSet, ds: Dataset, grid, reg: float | None = None) -> float:
    """Sup-norm distance on ``grid`` between the KRR fit and the optimal variational mean.

    ``reg`` defaults to ``sigma^2 / N``, where the two coincide.
    """
    reg = ds.noise_variance / ds.N if reg is None else reg
    model = krr_nystrom_fit(fs, ds, reg)
    grid = np.asarray(grid, dtype=float)
    mean, _ = optimal_predict(fs, ds, [Dirac(x) for x in grid])
    return float(np.max(np.abs(krr_predict(model, grid) - mean)))
