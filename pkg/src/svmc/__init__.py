"""Streaming variational Monte Carlo for online state-space inference."""

from .errors import (
    AllNegInfinity,
    ConfigError,
    DomainError,
    GridTooLarge,
    NotPositiveDefinite,
    NumericalError,
    ProposalUnsupported,
    SvmcError,
)
from .kalman import kalman_filter, kalman_nll
from .models import (
    GaussianEmission,
    LinearDynamics,
    PoissonEmission,
    StateSpaceModel,
    StudentTEmission,
    VrnnDynamics,
)
from .numerics import RngStream, cholesky, logsumexp
from .proposals import AffineProposal, LinearProposal, MlpProposal
from .smc import ParticleCloud, initial_cloud, resample, smc_step
from .svmc import SvmcConfig, elbo_objective_and_grad, svmc_step

__version__ = "0.1.0"
