"""Dense symmetric linear algebra with jitter safeguards, and 1-D quadrature.

Every matrix inverse in the package goes through :func:`cholesky_jittered`
followed by :func:`psd_solve`; no explicit inverse is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, NotPositiveDefiniteError, NumericError, ShapeError

#: Relative jitter levels tried in order; each is scaled by the mean diagonal.
JITTER_SCHEDULE: tuple[float, ...] = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and positive weights on ``[a, b]``."""

    a: float
    b: float
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def domain(self) -> tuple[float, float]:
        return (self.a, self.b)

    @property
    def size(self) -> int:
        return self.nodes.size

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.a) & (x <= self.b)


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of ``A + jitter_used * I``."""

    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def matrix(self) -> np.ndarray:
        """Reassemble ``lower @ lower.T``."""
        return self.lower @ self.lower.T


def _check_interval(domain: Sequence[float]) -> tuple[float, float]:
    a, b = (float(v) for v in domain)
    if not (np.isfinite(a) and np.isfinite(b)) or a >= b:
        raise DomainError(f"invalid interval [{a}, {b}]: need finite a < b")
    return a, b


def gauss_legendre_rule(domain: Sequence[float], p: int) -> QuadratureRule:
    """Gauss-Legendre rule with ``p`` nodes mapped affinely onto ``domain``."""
    a, b = _check_interval(domain)
    if int(p) < 1:
        raise ValueError(f"node count must be >= 1, got {p}")
    t, w = np.polynomial.legendre.leggauss(int(p))
    half = 0.5 * (b - a)
    return QuadratureRule(a, b, half * t + 0.5 * (a + b), half * w)


def composite_gauss_legendre(breaks: Sequence[float], p: int) -> QuadratureRule:
    """Gauss-Legendre with ``p`` nodes on each panel between consecutive breaks.

    Piecewise polynomials with kinks only at the breaks are integrated exactly
    up to degree ``2p - 1`` per panel.
    """
    breaks = np.asarray(breaks, dtype=float)
    if breaks.ndim != 1 or breaks.size < 2 or np.any(np.diff(breaks) <= 0):
        raise DomainError("breakpoints must be strictly increasing, at least two")
    panels = [gauss_legendre_rule((lo, hi), p) for lo, hi in zip(breaks[:-1], breaks[1:])]
    return QuadratureRule(
        float(breaks[0]),
        float(breaks[-1]),
        np.concatenate([r.nodes for r in panels]),
        np.concatenate([r.weights for r in panels]),
    )


def evaluate_on_nodes(f: Callable, rule: QuadratureRule) -> np.ndarray:
    """Evaluate a vectorised ``f`` at the rule nodes, rejecting non-finite values."""
    values = np.asarray(f(rule.nodes), dtype=float)
    if values.shape == ():
        values = np.full(rule.size, float(values))
    if values.shape != rule.nodes.shape:
        raise ShapeError(
            f"function returned shape {values.shape}, expected {rule.nodes.shape}"
        )
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        i = int(bad[0])
        raise NumericError(
            f"non-finite value {values[i]} at quadrature node {i} (x={rule.nodes[i]!r})"
        )
    return values


def integrate(f: Callable, rule: QuadratureRule) -> float:
    """Return ``sum_i w_i f(x_i)``; ``f`` must accept an array of nodes."""
    return float(rule.weights @ evaluate_on_nodes(f, rule))


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def cholesky_jittered(
    A: np.ndarray, schedule: Sequence[float] = JITTER_SCHEDULE
) -> CholFactor:
    """Cholesky of ``A + eps*I`` for the first ``eps`` in ``schedule`` that works.

    Schedule entries are relative: the absolute jitter is the entry times the
    mean diagonal of ``A`` (or times one if that mean is not positive).
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericError("matrix contains non-finite entries")
    n = A.shape[0]
    scale = float(np.mean(np.diag(A))) if n else 1.0
    if not scale > 0.0:
        scale = 1.0
    eye = np.eye(n)
    eps = 0.0
    for rel in schedule:
        eps = rel * scale
        try:
            lower = sla.cholesky(A + eps * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(lower) > 0.0):
            return CholFactor(lower, eps)
    raise NotPositiveDefiniteError(
        f"matrix not positive definite even with jitter {eps:.3g}", eps
    )


def psd_solve(factor: CholFactor, B: np.ndarray) -> np.ndarray:
    """Solve ``A X = B`` given the Cholesky factor of ``A``."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != factor.n:
        raise ShapeError(f"right-hand side has {B.shape[0]} rows, factor is {factor.n}x{factor.n}")
    return sla.cho_solve((factor.lower, True), B, check_finite=False)


def tri_solve(factor: CholFactor, B: np.ndarray) -> np.ndarray:
    """Return ``lower^{-1} B`` (one triangular solve)."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != factor.n:
        raise ShapeError(f"right-hand side has {B.shape[0]} rows, factor is {factor.n}x{factor.n}")
    return sla.solve_triangular(factor.lower, B, lower=True, check_finite=False)


def log_det(factor: CholFactor) -> float:
    return float(2.0 * np.sum(np.log(np.diag(factor.lower))))
