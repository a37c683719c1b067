"""Stochastic simulation of nonlinear oscillators with a measure-corrected
Euler-Maruyama scheme: drift-frozen proposals, Girsanov reweighting realized
by rejection sampling, and systematic resampling."""

from .core import (
    ConfigurationError,
    DegenerateEnsembleError,
    EstimationError,
    GammaDerivatives,
    NumericDomainError,
    OracleError,
    OscillatorModel,
    PathState,
    SimulationError,
    SingularShiftError,
    TimeGrid,
    drift,
    frozen_nonlinear,
    zero_gamma_derivatives,
)
from .brownian import IncrementPanel, sample_panel, value_at
from .girsanov import (
    GirsanovTerms,
    delta,
    discrete_radon_nikodym,
    gamma,
    lambda1,
    lambda2_log_integral,
    normal_shift_weight,
    phi,
)
from .em import em_path, em_step, reference_oracle, strong_order_estimate
from .models import (
    DvpParams,
    RvpParams,
    TwoDofParams,
    build_dvp,
    build_rvp,
    build_two_dof,
    rvp_stationary_moments,
)
from .sampler import (
    AcceptanceRecord,
    SamplerOptions,
    WeightedEnsemble,
    accept_lambda2,
    bound_normalize,
    em_simulate,
    neem_macro_step,
    neem_simulate,
    resample,
    thinning_accept,
    thinning_rate,
)
from .stats import MomentSeries, convergence_fit, second_moments

__version__ = "0.1.0"
