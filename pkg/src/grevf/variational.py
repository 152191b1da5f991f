"""Variational family indexed by a Gaussian law on the features.

A state pairs a :class:`FeatureSet` ``L`` with ``q = N(mu, Sigma)`` on
``R^M``. The induced approximation has, for any functionals ``T, T'``,

    mean(T)      = C_TL C_LL^{-1} mu
    cov(T, T')   = C_TT' + C_TL C_LL^{-1} (Sigma - C_LL) C_LL^{-1} C_LT'

with zero prior mean. All solves go through the Cholesky factor ``L`` of
``C_LL``; the optimum is evaluated in whitened form with
``A = L^{-1} C_LD / sigma`` and ``B = I + A A^T``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DivergenceError, ShapeError
from .exact import LOG_2PI, Dataset, as_feature_set, log_marginal
from .features import DualElement, FeatureSet
from .numerics import CholFactor, QuadratureRule, cholesky_jittered, log_det, symmetrize, tri_solve

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FiniteGaussian:
    """``N(mean, root @ root.T)``; ``root`` is any square root of the covariance."""

    mean: np.ndarray
    root: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        root = np.atleast_2d(np.asarray(self.root, dtype=float))
        if root.shape != (mean.size, mean.size):
            raise ShapeError(f"root has shape {root.shape}, mean has length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "root", root)

    @classmethod
    def from_cov(cls, mean, cov) -> "FiniteGaussian":
        """Cholesky root when ``cov`` is positive definite, eigen root when singular."""
        cov = symmetrize(np.atleast_2d(np.asarray(cov, dtype=float)))
        try:
            return cls(mean, sla.cholesky(cov, lower=True))
        except np.linalg.LinAlgError:
            vals, vecs = np.linalg.eigh(cov)
            return cls(mean, vecs * np.sqrt(np.clip(vals, 0.0, None)))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return symmetrize(self.root @ self.root.T)

    def log_det(self) -> float:
        sign, logabs = np.linalg.slogdet(self.root)
        return 2.0 * logabs if sign != 0 else -np.inf


def _kl_whitened(mu_q, root_q, logdet_q, mu_p, factor_p: CholFactor) -> float:
    M = mu_q.size
    trace = float(np.sum(tri_solve(factor_p, root_q) ** 2))
    maha = float(np.sum(tri_solve(factor_p, mu_p - mu_q) ** 2))
    return 0.5 * (trace + maha - M + log_det(factor_p) - logdet_q)


def kl_finite_gaussians(q: FiniteGaussian, p: FiniteGaussian) -> float:
    """``KL(q || p)`` between Gaussians on ``R^M``."""
    if q.dim != p.dim:
        raise ShapeError(f"dimension mismatch: {q.dim} vs {p.dim}")
    factor_p = cholesky_jittered(p.cov, schedule=(0.0,))
    return _kl_whitened(q.mean, q.root, q.log_det(), p.mean, factor_p)


@dataclass(frozen=True, eq=False)
class VariationalState:
    features: FeatureSet
    q: FiniteGaussian

    def __post_init__(self):
        if self.q.dim != self.features.M:
            raise ShapeError(f"q has dimension {self.q.dim}, feature set has {self.features.M}")

    @cached_property
    def factor(self) -> CholFactor:
        """Cholesky factor of ``C_LL`` (jittered if needed)."""
        return cholesky_jittered(self.features.gram)


def prior_state(fs: FeatureSet) -> VariationalState:
    """``q = N(0, C_LL)``, for which the approximation equals the prior."""
    factor = cholesky_jittered(fs.gram)
    state = VariationalState(fs, FiniteGaussian(np.zeros(fs.M), factor.lower))
    state.__dict__["factor"] = factor
    return state


def _targets(fs: FeatureSet, T, rule) -> FeatureSet:
    return as_feature_set(T, fs.kernel, rule if rule is not None else fs.rule, fs.domain)


def q_moments(
    vs: VariationalState, T: Sequence[DualElement] | FeatureSet, rule: Optional[QuadratureRule] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance matrix of the functionals ``T`` under the state."""
    tfs = _targets(vs.features, T, rule)
    C_LT = vs.features.cross_features(tfs)
    Aw = tri_solve(vs.factor, C_LT)
    B2 = sla.solve_triangular(vs.factor.lower, Aw, lower=True, trans="T", check_finite=False)
    mean = B2.T @ vs.q.mean
    S = vs.q.root.T @ B2
    cov = symmetrize(tfs.gram - Aw.T @ Aw + S.T @ S)
    return mean, cov


class _ElboParts:
    """Quantities of the ELBO that depend only on features and data."""

    def __init__(self, fs: FeatureSet, ds: Dataset, factor: Optional[CholFactor] = None):
        self.fs = fs
        self.ds = ds
        self.factor = factor if factor is not None else cholesky_jittered(fs.gram)
        C_LD = fs.cross(ds.X)
        Aw = tri_solve(self.factor, C_LD)
        # column n is C_LL^{-1} C_{L D_n}
        self.proj = sla.solve_triangular(self.factor.lower, Aw, lower=True, trans="T", check_finite=False)
        self.prior_var = fs.kernel(ds.X, ds.X) - np.sum(Aw * Aw, axis=0)
        self.sigma2 = ds.noise_variance

    def point_terms(self, mu, root, idx=None) -> np.ndarray:
        """Expected log-likelihood per observation (``idx`` selects a subset)."""
        proj = self.proj if idx is None else self.proj[:, idx]
        y = self.ds.y if idx is None else self.ds.y[idx]
        pv = self.prior_var if idx is None else self.prior_var[idx]
        mean = proj.T @ mu
        var = pv + np.sum((root.T @ proj) ** 2, axis=0)
        s2 = self.sigma2
        return -0.5 * (LOG_2PI + np.log(s2) + (y - mean) ** 2 / s2) - 0.5 * var / s2

    def kl(self, mu, root, logdet_q=None) -> float:
        if logdet_q is None:
            sign, logabs = np.linalg.slogdet(root)
            logdet_q = 2.0 * logabs if sign != 0 else -np.inf
        return _kl_whitened(mu, root, logdet_q, np.zeros_like(mu), self.factor)

    def value(self, mu, root, idx=None) -> float:
        terms = self.point_terms(mu, root, idx)
        scale = 1.0 if idx is None else self.ds.N / len(idx)
        return scale * float(np.sum(terms)) - self.kl(mu, root)

    def gradient(self, mu, R, idx=None) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of the (minibatch) ELBO in ``mu`` and in a lower-triangular ``R``."""
        proj = self.proj if idx is None else self.proj[:, idx]
        y = self.ds.y if idx is None else self.ds.y[idx]
        scale = 1.0 if idx is None else self.ds.N / len(idx)
        s2 = self.sigma2
        g_mu = scale * proj @ (y - proj.T @ mu) / s2 - sla.cho_solve((self.factor.lower, True), mu)
        R_inv_T = sla.solve_triangular(R, np.eye(R.shape[0]), lower=True).T
        g_R = (
            -(scale / s2) * proj @ (proj.T @ R)
            - sla.cho_solve((self.factor.lower, True), R)
            + R_inv_T
        )
        return g_mu, np.tril(g_R)


def elbo(vs: VariationalState, ds: Dataset) -> float:
    """Expected log-likelihood minus ``KL(q || N(0, C_LL))``."""
    parts = _ElboParts(vs.features, ds, vs.factor)
    return parts.value(vs.q.mean, vs.q.root)


def kl_to_posterior(vs: VariationalState, ds: Dataset) -> float:
    """KL from the induced approximation to the exact posterior: ``log p(y) - ELBO``."""
    return log_marginal(ds, vs.features.kernel) - elbo(vs, ds)


@dataclass(frozen=True, eq=False)
class _Optimum:
    factor: CholFactor
    LB: np.ndarray
    c: np.ndarray


def _optimum(fs: FeatureSet, ds: Dataset) -> _Optimum:
    factor = cholesky_jittered(fs.gram)
    sigma = np.sqrt(ds.noise_variance)
    A = tri_solve(factor, fs.cross(ds.X)) / sigma
    LB = cholesky_jittered(np.eye(fs.M) + A @ A.T).lower
    c = sla.solve_triangular(LB, A @ ds.y, lower=True, check_finite=False) / sigma
    return _Optimum(factor, LB, c)


def optimal_params(fs: FeatureSet, ds: Dataset) -> FiniteGaussian:
    """ELBO-maximising ``(mu, Sigma)`` for fixed features.

    ``mu = C_LL (sigma^2 C_LL + C_LD C_DL)^{-1} C_LD y`` and
    ``Sigma = C_LL (C_LL + C_LD C_DL / sigma^2)^{-1} C_LL``, returned with the
    square root ``L LB^{-T}`` of ``Sigma``.
    """
    opt = _optimum(fs, ds)
    root = sla.solve_triangular(opt.LB, opt.factor.lower.T, lower=True, check_finite=False).T
    return FiniteGaussian(root @ opt.c, root)


def optimal_state(fs: FeatureSet, ds: Dataset) -> VariationalState:
    return VariationalState(fs, optimal_params(fs, ds))


def optimal_predict(
    fs: FeatureSet,
    ds: Dataset,
    T: Sequence[DualElement] | FeatureSet,
    rule: Optional[QuadratureRule] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of ``T`` under the optimal member of the family."""
    opt = _optimum(fs, ds)
    tfs = _targets(fs, T, rule)
    Aw = tri_solve(opt.factor, fs.cross_features(tfs))
    Bw = sla.solve_triangular(opt.LB, Aw, lower=True, check_finite=False)
    mean = Bw.T @ opt.c
    cov = symmetrize(tfs.gram - Aw.T @ Aw + Bw.T @ Bw)
    return mean, cov


# --------------------------------------------------------------------------
# numerical optimisation
# --------------------------------------------------------------------------


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class OptimizerConfig:
    step: float = 0.01
    iters: int = 2000
    batch_size: Optional[int] = None
    seed: int = 0
    tol: float = 1e-4
    backtrack: bool = True


@dataclass
class OptimizationResult:
    state: VariationalState
    trace: list = field(default_factory=list)
    iterations: int = 0


def _pack(mu, R):
    raw = R.copy()
    idx = np.diag_indices_from(raw)
    raw[idx] = softplus_inv(np.diag(R))
    return mu.copy(), raw


def _unpack(raw):
    R = np.tril(raw)
    idx = np.diag_indices_from(R)
    R[idx] = softplus(np.diag(raw))
    return R


def unconstrained_gradient(parts: _ElboParts, mu, raw, idx=None):
    """ELBO gradient in the unconstrained coordinates ``(mu, raw)``.

    ``raw`` is lower triangular; its diagonal maps to the Cholesky diagonal
    through softplus.
    """
    R = _unpack(raw)
    g_mu, g_R = parts.gradient(mu, R, idx)
    g_raw = g_R.copy()
    d = np.diag_indices_from(g_raw)
    g_raw[d] = np.diag(g_R) * _sigmoid(np.diag(raw))
    return g_mu, g_raw


def epoch_batches(N: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """A random partition of ``range(N)`` into consecutive batches."""
    perm = rng.permutation(N)
    return [perm[i:i + batch_size] for i in range(0, N, batch_size)]


def optimize_elbo(
    fs: FeatureSet,
    ds: Dataset,
    cfg: OptimizerConfig = OptimizerConfig(),
    init: Optional[VariationalState] = None,
) -> OptimizationResult:
    """Gradient ascent on ``(mu, chol(Sigma))`` with optional minibatching.

    Starts from ``q = N(0, C_LL)`` unless ``init`` is given. In full-batch mode
    with ``cfg.backtrack`` a step that lowers the ELBO is retried at half the
    step size, so the ELBO trace is non-decreasing. Minibatch steps are plain.
    """
    state = init if init is not None else prior_state(fs)
    parts = _ElboParts(fs, ds, state.factor)
    if cfg.iters <= 0:
        return OptimizationResult(state, [(0, parts.value(state.q.mean, state.q.root))], 0)

    R0 = state.q.root
    if not np.allclose(R0, np.tril(R0)) or np.any(np.diag(R0) <= 0):
        R0 = cholesky_jittered(state.q.cov).lower
    mu, raw = _pack(state.q.mean, R0)
    batch = cfg.batch_size if cfg.batch_size and cfg.batch_size < ds.N else None
    rng = np.random.default_rng(cfg.seed)
    step = cfg.step
    current = parts.value(mu, _unpack(raw))
    trace = [(0, current)]
    batches: list[np.ndarray] = []
    it = 0
    for it in range(1, cfg.iters + 1):
        if batch is None:
            g_mu, g_raw = unconstrained_gradient(parts, mu, raw)
            for _ in range(60):
                mu_new, raw_new = mu + step * g_mu, raw + step * g_raw
                value = parts.value(mu_new, _unpack(raw_new))
                if not cfg.backtrack or (np.isfinite(value) and value >= current):
                    break
                step *= 0.5
            if not np.isfinite(value):
                raise DivergenceError(f"ELBO became non-finite at iteration {it}", it)
            if value == current and step < 1e-300:
                break
        else:
            if not batches:
                batches = epoch_batches(ds.N, batch, rng)
            idx = batches.pop(0)
            g_mu, g_raw = unconstrained_gradient(parts, mu, raw, idx)
            mu_new, raw_new = mu + step * g_mu, raw + step * g_raw
            value = parts.value(mu_new, _unpack(raw_new))
            if not np.isfinite(value):
                raise DivergenceError(f"ELBO became non-finite at iteration {it}", it)
        mu, raw, current = mu_new, raw_new, value
        trace.append((it, current))
        if batch is None and max(np.max(np.abs(g_mu)), np.max(np.abs(g_raw))) < 1e-12:
            break
    log.debug("optimize_elbo: %d iterations, final ELBO %.12g", it, current)
    final = VariationalState(fs, FiniteGaussian(mu, _unpack(raw)))
    final.__dict__["factor"] = parts.factor
    return OptimizationResult(final, trace, it)
