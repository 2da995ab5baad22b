"""Continuous-time dynamics of TD learning with learned linear representations."""

from .mdp import (
    ConvergenceError,
    MarkovRewardProcess,
    RewardSpec,
    is_reversible,
    key_matrix,
    load_mdp,
    make_random_mdp,
    make_rng,
    make_symmetric_mdp,
    mdp_from_json,
    mdp_to_json,
    reversibility_residual,
    sample_doubly_stochastic,
    sample_permutation,
    sample_random_rewards,
    save_mdp,
    stationary_distribution,
    value_function,
)
from .metrics import (
    IllConditionedError,
    MetricReport,
    covariance_drift,
    critical_point_residual,
    gradient_check,
    invariant_subspace_residual,
    normalized_trace_objective,
    projection_onto_span,
    reports_to_csv,
    trace_ceiling,
    trace_objective,
    weighted_error_gradients,
    weighted_value_error,
)
from .dynamics import (
    END_TO_END,
    KINDS,
    LINEAR_TD,
    METRIC_COLUMNS,
    TWO_TIME_SCALE,
    DynamicsSpec,
    IntegrationError,
    IntegratorConfig,
    TrajectoryLog,
    discrete_step,
    end_to_end,
    expected_semi_gradients,
    integrate,
    linear_td,
    orthonormal_init,
    td_fixed_point,
    two_time_scale,
)

__version__ = "0.1.0"
