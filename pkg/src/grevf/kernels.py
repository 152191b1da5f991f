"""Stationary kernels on an interval, the integral operator and its eigensystem."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import CapacityError, DomainError, NumericError, RankError
from .numerics import QuadratureRule, evaluate_on_nodes

FAMILIES = ("se", "matern12", "matern32", "matern52")

_ALIASES = {
    "se": "se",
    "squaredexponential": "se",
    "squared_exponential": "se",
    "rbf": "se",
    "matern12": "matern12",
    "matern32": "matern32",
    "matern52": "matern52",
    "exponential": "matern12",
}

#: Eigenvalues below this fraction of the largest one are discarded.
EIGEN_FLOOR = 1e-12


@dataclass(frozen=True)
class Kernel:
    """Stationary covariance function ``k(x, x') = variance * rho(|x - x'| / lengthscale)``."""

    family: str = "se"
    lengthscale: float = 1.0
    variance: float = 1.0

    def __post_init__(self):
        key = str(self.family).lower().replace("-", "").replace(" ", "")
        if key not in _ALIASES:
            raise ValueError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        object.__setattr__(self, "family", _ALIASES[key])
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise ValueError(f"signal variance must be positive, got {self.variance}")

    def profile(self, r: np.ndarray) -> np.ndarray:
        """Kernel as a function of the distance ``r >= 0``."""
        s = r / self.lengthscale
        if self.family == "se":
            out = np.exp(-0.5 * s * s)
        elif self.family == "matern12":
            out = np.exp(-s)
        elif self.family == "matern32":
            t = np.sqrt(3.0) * s
            out = (1.0 + t) * np.exp(-t)
        else:
            t = np.sqrt(5.0) * s
            out = (1.0 + t + t * t / 3.0) * np.exp(-t)
        return self.variance * out

    def __call__(self, x, x2) -> np.ndarray:
        """Broadcasting evaluation of ``k(x, x2)``."""
        x = np.asarray(x, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        return self.profile(np.abs(x - x2))


def kernel_eval(k: Kernel, x: float, x2: float) -> float:
    if not (np.isfinite(x) and np.isfinite(x2)):
        raise NumericError(f"non-finite kernel input ({x}, {x2})")
    return float(k(x, x2))


def check_in_domain(X, domain: Optional[Sequence[float]]) -> np.ndarray:
    X = np.atleast_1d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise NumericError("locations contain non-finite values")
    if domain is not None:
        a, b = domain
        outside = X[(X < a) | (X > b)]
        if outside.size:
            shown = ", ".join(f"{v:g}" for v in outside[:5])
            raise DomainError(f"locations outside [{a:g}, {b:g}]: {shown}")
    return X


def gram_matrix(k: Kernel, X, X2=None, domain: Optional[Sequence[float]] = None) -> np.ndarray:
    """Matrix of ``k(X_i, X2_j)``; symmetric when ``X2`` is omitted."""
    X = check_in_domain(X, domain)
    if X2 is None:
        K = k(X[:, None], X[None, :])
        return 0.5 * (K + K.T)
    X2 = check_in_domain(X2, domain)
    return k(X[:, None], X2[None, :])


def integral_operator_apply(k: Kernel, f: Callable, rule: QuadratureRule, x) -> np.ndarray | float:
    """Quadrature approximation of ``(T_k f)(x) = int k(x, t) f(t) dt``."""
    fx = evaluate_on_nodes(f, rule)
    xs = check_in_domain(x, rule.domain)
    out = k(xs[:, None], rule.nodes[None, :]) @ (rule.weights * fx)
    return float(out[0]) if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class EigenSystem:
    """Discretised Mercer eigenpairs of ``T_k``.

    ``node_values[:, m]`` holds ``e_m`` at the rule nodes; off-node values come
    from the Nystrom extension ``e_m(x) = sum_i w_i k(x, x_i) e_m(x_i) / lambda_m``.
    """

    kernel: Kernel
    rule: QuadratureRule
    eigenvalues: np.ndarray
    node_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    def __call__(self, x) -> np.ndarray:
        """Eigenfunctions at ``x``; shape ``(len(x), rank)``."""
        xs = check_in_domain(x, self.rule.domain)
        K = self.kernel(xs[:, None], self.rule.nodes[None, :])
        return (K @ (self.rule.weights[:, None] * self.node_values)) / self.eigenvalues

    def eigenfunction(self, m: int) -> Callable[[np.ndarray], np.ndarray]:
        return lambda x: self(x)[:, m]

    def reconstruct(self, x, x2) -> np.ndarray:
        """Truncated Mercer sum ``sum_m lambda_m e_m(x) e_m(x2)``."""
        return (self(x) * self.eigenvalues) @ self(x2).T


def nystrom_eigensystem(k: Kernel, rule: QuadratureRule, M: int) -> EigenSystem:
    """Leading ``M`` eigenpairs from the weighted eigenproblem ``W^1/2 K W^1/2``."""
    p = rule.size
    if M > p:
        raise CapacityError(f"requested {M} eigenpairs but the rule has only {p} nodes")
    if M < 1:
        raise ValueError("M must be at least 1")
    sw = np.sqrt(rule.weights)
    K = gram_matrix(k, rule.nodes)
    A = sw[:, None] * K * sw[None, :]
    vals, vecs = sla.eigh(0.5 * (A + A.T), subset_by_index=[p - M, p - 1])
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if not vals[0] > 0:
        raise RankError("kernel integral operator has no positive eigenvalue on this rule")
    tiny = np.flatnonzero(vals < EIGEN_FLOOR * vals[0])
    keep = int(tiny[0]) if tiny.size else M
    vals, vecs = vals[:keep], vecs[:, :keep]
    # fix sign so that each eigenfunction has a positive integral-weighted sum
    signs = np.where(sw @ vecs < 0, -1.0, 1.0)
    return EigenSystem(k, rule, vals, (vecs * signs) / sw[:, None])
