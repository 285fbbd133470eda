"""Filtering and Bayesian inference for continuous-time branching processes.

The package simulates multitype branching processes observed through
linear Gaussian measurements and evaluates their likelihood with one of
three engines: a bootstrap particle filter, a Gaussian moment-matching
(Kalman) filter, and a hybrid that switches between them by population
size. Parameters are sampled with adaptive random-walk Metropolis-Hastings.
"""

from .branching import (
    BranchingModel,
    CtbpTransition,
    MomentOperators,
    augment_immigration,
    build_omega,
    build_variance_source,
    compute_moment_operators,
    conditional_mean,
    conditional_var,
    simulate,
    simulate_events,
)
from .errors import (
    ConfigError,
    DimensionError,
    InvalidInputError,
    NumericalError,
    ParseError,
    UnsupportedFormatError,
    UnsupportedOperationError,
)
from .gaussian import (
    FilterTrace,
    GaussianBelief,
    ObservationModel,
    predict,
    reset_counters,
    rts_smooth,
    run_gaussian_filter,
    update,
)
from .hybrid import SwitchPolicy, in_gaussian_regime, moments_from_particles, particles_from_gaussian, run_hybrid
from .inference import (
    ChainTrace,
    Flat,
    Gamma,
    GaussianProcessGrid,
    MHConfig,
    MultivariateNormal,
    ParameterSpace,
    PriorSpec,
    ess,
    log_prior,
    mh_run,
    posterior_predictive,
    rhat,
)
from .linalg import expm, kron, kron_sum, unvec, vec
from .models import (
    PiecewiseParams,
    SeirParams,
    StagedSeirParams,
    Window,
    build_piecewise,
    build_seir,
    build_staged_seir,
    weekly_windows,
)
from .particle import ParticleEnsemble, fixed_initial, gaussian_initial, pf_step, resample, run_pf

__version__ = "0.1.0"
