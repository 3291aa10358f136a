"""Simulation, adaptive coupon allocation, and finite-sample inference for
respondent-driven sampling on latent-distance networks."""

from .errors import ConfigError, NumericalError, SingularFitError
from .network import (
    A1,
    A2,
    A3,
    TYPE_ALLOCATIONS,
    NetworkParams,
    Population,
    edge_prob,
    neighbor_selection_probs,
    sample_population,
)
from .rds import (
    ParticipantRecord,
    StudyState,
    build_weighted_sample,
    epoch_partition,
    load_trajectory,
    online_sample,
    resolved_sample,
    run_study,
    save_trajectory,
    seed_sample,
)
from .branching import (
    TYPE_MODEL,
    VALUE_MODEL,
    BranchingParams,
    RecruiterDatum,
    WeightedSample,
    family_logpmf,
    family_moments,
    family_sample,
    fit_wmle,
    generalized_bootstrap,
    hessian,
    loglik,
    method_of_moments_init,
    score,
    simulate_branching_data,
    simulate_rollout,
    stabilizing_weights,
    truncexp_logpdf,
    truncexp_mean,
    truncexp_sample,
    type_model_params,
    value_model_params,
    working_model_diagnostics,
)
from .policies import (
    ActionSpaceSpec,
    FixedPolicy,
    PolicyParams,
    RandomPolicy,
    RLRDSPolicy,
    TrainAndImplementPolicy,
    clip_bounds,
    estimate_value,
    make_policy,
    policy_search,
    thompson_policy_search,
    thompson_select,
)
from .inference import (
    ABC,
    BS_LLR,
    BS_WI,
    EMPTY_INTERVAL,
    SBI,
    ConfidenceRegion,
    CovariateModel,
    CovariatePairs,
    ThetaGrid,
    abc_region,
    approx_beta_bar,
    bootstrap_mles,
    bootstrap_region,
    covariate_loglik,
    covariate_mle,
    ensure_cache,
    llr_stat,
    project,
    sbi_region,
    simulate_study_pairs,
)
from .harness import (
    ExperimentConfig,
    ResultTable,
    run_coverage_study,
    run_policy_comparison,
)

__version__ = "0.1.0"
