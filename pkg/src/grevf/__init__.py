"""Gaussian-process regression through linear functionals: exact posterior,
variational approximation with inducing/inter-domain/RKHS features, and
Nystrom kernel ridge regression."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CapacityError,
    DivergenceError,
    DomainError,
    GrevfError,
    NotPositiveDefiniteError,
    NumericError,
    RankError,
    ShapeError,
)
from .exact import Dataset, fit_exact, log_marginal, predict_exact  # noqa: E402
from .features import (  # noqa: E402
    Dirac,
    FeatureSet,
    InterDomain,
    RkhsPreimage,
    feature_cov,
    feature_data_cross,
    feature_gram,
    feature_point_cov,
    make_bump_interdomain,
    make_eigen_features,
)
from .kernels import Kernel, gram_matrix, kernel_eval, nystrom_eigensystem  # noqa: E402
from .numerics import gauss_legendre_rule  # noqa: E402
from .nystrom import equivalence_gap, krr_nystrom_fit, krr_predict  # noqa: E402
from .variational import (  # noqa: E402
    FiniteGaussian,
    OptimizerConfig,
    VariationalState,
    elbo,
    kl_finite_gaussians,
    kl_to_posterior,
    optimal_params,
    optimal_predict,
    optimize_elbo,
    q_moments,
)
