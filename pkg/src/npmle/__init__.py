"""Nonparametric maximum likelihood for Gaussian location mixtures."""
from .errors import (
    ConfigError,
    DegenerateRowError,
    DomainError,
    InvalidCovarianceError,
    NPMLEError,
    ParseError,
)
from .model import (
    Covariance,
    Dataset,
    DiscreteDistribution,
    LikelihoodMatrix,
    SupportGrid,
    build_likelihood,
    gaussian_logdensity,
    log_likelihood,
    low_rank_approx,
    make_grid,
)
from .alm import ALMOptions, SolveReport, alm_fit, kkt_residuals

__version__ = "0.1.0"
