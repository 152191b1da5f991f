import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import DOMAIN, make_dataset
from grevf.exact import Dataset
from grevf.features import Dirac, FeatureSet, make_bump_interdomain, make_eigen_features
from grevf.kernels import Kernel
from grevf.numerics import gauss_legendre_rule
from grevf.nystrom import (
    basis_at,
    basis_gram,
    equivalence_gap,
    krr_nystrom_fit,
    krr_objective,
    krr_predict,
)
from grevf.variational import optimal_params

GRID = np.linspace(0, 5, 101)


def inducing(k, M):
    return FeatureSet([Dirac(z) for z in np.linspace(0.2, 4.8, M)], k, domain=DOMAIN)


def coordinate_descent(fs, ds, reg, sweeps=20000, tol=1e-14):
    """Exact coordinate minimisation of the quadratic objective."""
    K_MX, K_MM = basis_at(fs, ds.X), basis_gram(fs)
    H = 2 * K_MX @ K_MX.T / ds.N + 2 * reg * K_MM
    b = 2 * K_MX @ ds.y / ds.N
    a = np.zeros(fs.M)
    for _ in range(sweeps):
        step = 0.0
        for j in range(fs.M):
            delta = (b[j] - H[j] @ a) / H[j, j]
            a[j] += delta
            step = max(step, abs(delta))
        if step < tol:
            break
    return a


def test_zero_targets(se):
    ds = Dataset(np.linspace(0, 5, 8), np.zeros(8), 0.1)
    np.testing.assert_array_equal(krr_nystrom_fit(inducing(se, 4), ds, 0.01).coef, 0.0)


def test_scalar(se):
    # M = N = 1 with k = 1: alpha = y / (1 + N lam)
    ds = Dataset([1.3], [2.0], 0.1)
    model = krr_nystrom_fit(FeatureSet([Dirac(1.3)], se), ds, 0.25)
    assert model.coef[0] == pytest.approx(2.0 / 1.25, abs=1e-14)


def test_interpolates_with_tiny_regulariser(se):
    X = np.linspace(0.5, 4.5, 6)
    ds = Dataset(X, np.sin(2 * X), 0.1)
    model = krr_nystrom_fit(FeatureSet([Dirac(x) for x in X], se), ds, 1e-10)
    assert np.max(np.abs(krr_predict(model, X) - ds.y)) <= 1e-3


def test_predict_is_basis_readout(se, ds20):
    fs = inducing(se, 5)
    model = krr_nystrom_fit(fs, ds20, 0.01)
    expected = sum(a * se(GRID, z) for a, z in zip(model.coef, np.linspace(0.2, 4.8, 5)))
    np.testing.assert_allclose(krr_predict(model, GRID), expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_matches_coordinate_descent(seed):
    k = Kernel(["se", "matern32", "matern52", "matern12"][seed], 1.0, 1.0)
    ds = make_dataset(25, seed=seed)
    fs = inducing(k, 5)
    reg = 0.05
    model = krr_nystrom_fit(fs, ds, reg)
    assert np.max(np.abs(model.coef - coordinate_descent(fs, ds, reg))) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), M=st.integers(1, 8), reg=st.floats(1e-4, 1.0))
def test_fit_minimises_objective(seed, M, reg):
    k = Kernel("se", 1.0, 1.0)
    ds = make_dataset(15, seed=seed % 1000)
    fs = inducing(k, M)
    model = krr_nystrom_fit(fs, ds, reg)
    assert model.objective == pytest.approx(krr_objective(fs, ds, reg, model.coef))
    rng = np.random.default_rng(seed)
    for _ in range(5):
        other = model.coef + rng.standard_normal(M) * rng.choice([1e-3, 1e-1, 1.0])
        assert model.objective <= krr_objective(fs, ds, reg, other) + 1e-10


def test_gram_identity(se):
    # K_MM equals the basis functions' RKHS inner products; for point representers
    # <k(., z_i), k(., z_j)>_k = k(z_i, z_j).
    Z = np.linspace(0.2, 4.8, 6)
    np.testing.assert_array_equal(basis_gram(FeatureSet([Dirac(z) for z in Z], se)), se(Z[:, None], Z[None, :]))


def test_rejects_nonpositive_regulariser(se, ds20):
    with pytest.raises(ValueError):
        krr_nystrom_fit(inducing(se, 3), ds20, 0.0)


class TestEquivalence:
    @pytest.mark.parametrize("N,M", [(5, 2), (20, 5), (40, 8)])
    def test_dirac(self, N, M, se):
        ds = make_dataset(N, seed=N)
        assert equivalence_gap(inducing(se, M), ds, GRID) <= 1e-8

    @pytest.mark.parametrize("M", [2, 5, 8])
    def test_bumps(self, M):
        k = Kernel("matern32", 1.0, 1.0)
        ds = make_dataset(30, seed=M)
        fs = FeatureSet([make_bump_interdomain(c, 0.2, DOMAIN) for c in np.linspace(0.5, 4.5, M)], k, domain=DOMAIN)
        assert equivalence_gap(fs, ds, GRID) <= 1e-6

    @pytest.mark.parametrize("M", [2, 4, 6])
    def test_eigen(self, M, se):
        ds = make_dataset(25, seed=M)
        fs = make_eigen_features(se, gauss_legendre_rule(DOMAIN, 96), M)
        assert equivalence_gap(fs, ds, GRID) <= 1e-6

    def test_coefficients_relate_to_optimal_mean(self, se, ds20):
        # f(x) = C_xL C_LL^{-1} mu*, so alpha = C_LL^{-1} mu*
        fs = inducing(se, 6)
        model = krr_nystrom_fit(fs, ds20, ds20.noise_variance / ds20.N)
        mu = optimal_params(fs, ds20).mean
        np.testing.assert_allclose(basis_gram(fs) @ model.coef, mu, atol=1e-8)

    def test_wrong_regulariser_breaks_equivalence(self, se, ds20):
        fs = inducing(se, 6)
        assert equivalence_gap(fs, ds20, GRID, reg=2 * ds20.noise_variance / ds20.N) > 1e-3
