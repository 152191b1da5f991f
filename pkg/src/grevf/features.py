"""Features as linear functionals of the process, and their covariances.

Every supported functional is a finite signed measure once discretised:

* ``Dirac(z)`` is a unit point mass at ``z``;
* ``InterDomain(g)`` is ``g(x) dx``, discretised as masses ``w_i g(x_i)``;
* ``RkhsPreimage(f)`` observes ``<F, T_k f>_k``, which equals the
  inter-domain functional with test function ``f``.

Covariances between two measures are ``sum_ij a_i b_j k(x_i, x_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, RankError
from .kernels import EigenSystem, Kernel, check_in_domain, gram_matrix, nystrom_eigensystem
from .numerics import QuadratureRule, composite_gauss_legendre, evaluate_on_nodes, symmetrize


@dataclass(frozen=True)
class Dirac:
    """Point evaluation at ``z``."""

    z: float


@dataclass(frozen=True)
class InterDomain:
    """``L F = int F(x) g(x) dx``. ``rule`` overrides the feature set's shared rule."""

    g: Callable[[np.ndarray], np.ndarray]
    rule: Optional[QuadratureRule] = None
    label: str = "interdomain"


@dataclass(frozen=True)
class RkhsPreimage:
    """RKHS feature ``<F, T_k f>_k`` stored through its preimage ``f``.

    Inverting ``T_k`` is ill-posed, so callers supply ``f`` rather than the
    realised representer ``g = T_k f``. Whether a given ``g`` lies in the range
    of ``T_k`` is not checked.
    """

    f: Callable[[np.ndarray], np.ndarray]
    rule: Optional[QuadratureRule] = None
    label: str = "rkhs"


DualElement = Union[Dirac, InterDomain, RkhsPreimage]


def _discretise(el: DualElement, rule: Optional[QuadratureRule], domain) -> tuple[np.ndarray, np.ndarray, object]:
    """Return ``(nodes, masses, key)`` of the measure; ``key`` identifies shared nodes."""
    if isinstance(el, Dirac):
        z = check_in_domain(el.z, domain)
        return z, np.ones(1), None
    if isinstance(el, (InterDomain, RkhsPreimage)):
        r = el.rule if el.rule is not None else rule
        if r is None:
            raise ValueError(f"{type(el).__name__} feature needs a quadrature rule")
        if domain is not None and (r.a < domain[0] or r.b > domain[1]):
            raise DomainError(
                f"feature support [{r.a:g}, {r.b:g}] leaves domain [{domain[0]:g}, {domain[1]:g}]"
            )
        fn = el.g if isinstance(el, InterDomain) else el.f
        return r.nodes, r.weights * evaluate_on_nodes(fn, r), r
    raise TypeError(f"not a dual element: {el!r}")


def feature_cov(a: DualElement, b: DualElement, kernel: Kernel, rule: Optional[QuadratureRule] = None) -> float:
    """Prior covariance between the two functionals of the process."""
    domain = rule.domain if rule is not None else None
    xa, ma, _ = _discretise(a, rule, domain)
    xb, mb, _ = _discretise(b, rule, domain)
    return float(ma @ kernel(xa[:, None], xb[None, :]) @ mb)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Ordered features sharing a kernel and (optionally) a quadrature rule.

    ``rule`` is required when any function-valued feature lacks its own rule;
    its interval is also the domain that locations are validated against.
    """

    elements: tuple
    kernel: Kernel
    rule: Optional[QuadratureRule] = None
    domain: Optional[tuple] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements:
            raise ValueError("a feature set needs at least one element")
        if self.domain is None and self.rule is not None:
            object.__setattr__(self, "domain", self.rule.domain)
        self._measure  # validates every element eagerly

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def M(self) -> int:
        return len(self.elements)

    @cached_property
    def all_dirac(self) -> bool:
        return all(isinstance(el, Dirac) for el in self.elements)

    @cached_property
    def dirac_locations(self) -> np.ndarray:
        return np.array([el.z for el in self.elements if isinstance(el, Dirac)], dtype=float)

    @cached_property
    def _measure(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique support nodes and the ``(n_nodes, M)`` mass matrix."""
        blocks: list[np.ndarray] = []
        offsets: dict[int, int] = {}
        cols: list[tuple[int, np.ndarray]] = []
        n = 0
        for el in self.elements:
            x, m, key = _discretise(el, self.rule, self.domain)
            if key is not None and id(key) in offsets:
                start = offsets[id(key)]
            else:
                start = n
                blocks.append(x)
                n += x.size
                if key is not None:
                    offsets[id(key)] = start
            cols.append((start, m))
        P = np.zeros((n, self.M))
        for j, (start, m) in enumerate(cols):
            P[start:start + m.size, j] = m
        return np.concatenate(blocks), P

    @cached_property
    def gram(self) -> np.ndarray:
        if self.all_dirac:
            return gram_matrix(self.kernel, self.dirac_locations)
        nodes, P = self._measure
        return symmetrize(P.T @ gram_matrix(self.kernel, nodes) @ P)

    def cross(self, X) -> np.ndarray:
        X = check_in_domain(X, self.domain)
        if self.all_dirac:
            return gram_matrix(self.kernel, self.dirac_locations, X)
        nodes, P = self._measure
        return P.T @ self.kernel(nodes[:, None], X[None, :])

    def cross_features(self, other: "FeatureSet") -> np.ndarray:
        """``(M, M_other)`` covariances between the two feature sets."""
        if self.all_dirac and other.all_dirac:
            return gram_matrix(self.kernel, self.dirac_locations, other.dirac_locations)
        na, Pa = self._measure
        nb, Pb = other._measure
        return Pa.T @ self.kernel(na[:, None], nb[None, :]) @ Pb


def feature_gram(fs: FeatureSet) -> np.ndarray:
    """``C_LL``: symmetric ``(M, M)`` covariance of the features."""
    return fs.gram


def feature_data_cross(fs: FeatureSet, X) -> np.ndarray:
    """``C_LD``: ``(M, N)`` covariance between features and point values at ``X``."""
    return fs.cross(X)


def feature_point_cov(fs: FeatureSet, x: float) -> np.ndarray:
    """Covariance of each feature with ``F(x)``."""
    return fs.cross([x])[:, 0]


def basis_functions(fs: FeatureSet, X) -> np.ndarray:
    """Values of the representers ``x -> Cov(L_m F, F(x))``; shape ``(len(X), M)``."""
    return fs.cross(X).T


def make_eigen_features(
    k: Kernel, rule: QuadratureRule, M: int, eigensystem: Optional[EigenSystem] = None
) -> FeatureSet:
    """Features with preimages ``e_m / lambda_m`` so that ``T_k f_m = e_m``.

    Their Gram matrix is diagonal with entries ``1 / lambda_m``.
    """
    eig = eigensystem if eigensystem is not None else nystrom_eigensystem(k, rule, M)
    if M > eig.rank:
        raise RankError(f"eigensystem has rank {eig.rank} < {M}")

    def preimage(m):
        lam = eig.eigenvalues[m]
        return lambda x: eig(x)[:, m] / lam

    elements = [RkhsPreimage(preimage(m), label=f"eigen{m}") for m in range(M)]
    return FeatureSet(elements, k, eig.rule)


def triangular_bump(c: float, h: float) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: np.maximum(0.0, 1.0 - np.abs(np.asarray(x, dtype=float) - c) / h) / h


def make_bump_interdomain(
    c: float, h: float, domain: Optional[Sequence[float]] = None, nodes_per_side: int = 32
) -> InterDomain:
    """Unit-mass triangular bump on ``[c - h, c + h]`` with a support-adapted rule.

    The rule has a panel break at ``c`` so the piecewise-linear weight is
    integrated without kink error.
    """
    if not h > 0:
        raise ValueError(f"bump width must be positive, got {h}")
    lo, hi = c - h, c + h
    if domain is not None and (lo < domain[0] or hi > domain[1]):
        raise DomainError(f"bump support [{lo:g}, {hi:g}] leaves domain [{domain[0]:g}, {domain[1]:g}]")
    rule = composite_gauss_legendre([lo, c, hi], nodes_per_side)
    return InterDomain(triangular_bump(c, h), rule=rule, label=f"bump({c:g},{h:g})")


def tabulated_interdomain(xs: Sequence[float], gs: Sequence[float], label: str = "table") -> InterDomain:
    """Inter-domain feature whose test function is linear interpolation of a table."""
    xs = np.asarray(xs, dtype=float)
    gs = np.asarray(gs, dtype=float)
    order = np.argsort(xs)
    xs, gs = xs[order], gs[order]
    return InterDomain(lambda x: np.interp(x, xs, gs), label=label)


def eigen_expansion_gram(fs: FeatureSet, eig: EigenSystem) -> np.ndarray:
    """``C_LL`` through the Mercer expansion ``sum_j lambda_j <e_j, L_m><e_j, L_m'>``.

    An independent route to :func:`feature_gram`; accuracy is limited by the
    truncation rank of ``eig``.
    """
    coeffs = np.empty((eig.rank, fs.M))
    for m, el in enumerate(fs.elements):
        x, masses, _ = _discretise(el, fs.rule, fs.domain)
        coeffs[:, m] = eig(x).T @ masses
    return symmetrize((coeffs.T * eig.eigenvalues) @ coeffs)
