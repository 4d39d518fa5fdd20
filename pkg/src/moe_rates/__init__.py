"""Over-specified Gaussian mixtures of experts with covariate-free gating:
transportation distances, EM fitting, algebraic rate machinery, and a Monte
Carlo rate-experiment harness."""

from .errors import CapabilityError, IndeterminateError, ValidationError
from .model import (
    CovariatePrior,
    Dataset,
    ExpertPair,
    FAMILY_IDS,
    MixingMeasure,
    conditional_density,
    dataset_from_csv,
    dataset_to_csv,
    expert_pair,
    gaussian_density,
    h1_partials,
    h2sq_partials,
    joint_density,
    measure_from_json,
    measure_to_json,
    sample,
    uniform_prior,
)
from .deriv import density_theta_partial, gaussian_h1_derivative, hermite_e, operator_expansion
from .transport import (
    Coupling,
    KappaVector,
    atom_match_report,
    d_kappa,
    d_kappa_pow,
    d_kappa_surrogate,
    transport_simplex,
    wasserstein_kappa,
)
from .divergence import DivergenceResult, QuadratureSpec, hellinger, ratio_profile, total_variation
from .mle import FitConfig, FitResult, em_fit, loglik, multistart_init, project_simplex_floor
from .algebra import (
    IndependenceVerdict,
    PPolyTable,
    RbarResult,
    independence_check,
    limit_system_residuals,
    p_polynomials,
    poly_system_residual,
    rbar,
    rtilde_bracket,
)
from .experiments import (
    RateReport,
    Scenario,
    builtin_scenarios,
    get_scenario,
    run_rate_experiment,
    run_witness_experiment,
    witness_cancellation_sums,
    witness_sequence,
)

__version__ = "0.1.0"
