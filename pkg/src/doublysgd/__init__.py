"""Laboratory for SGD with doubly stochastic gradients.

Synthetic finite-sum problems whose components are intractable
expectations, minibatch subsampling with and without replacement, random
reshuffling, correlated Monte Carlo gradient estimators, and closed-form
variance bounds checked against exact oracles and Monte Carlo
measurement.
"""

__version__ = "0.1.0"

from .estimators import (
    GradientEstimate,
    NoiseBlock,
    component_gradient_integrand,
    doubly_stochastic_gradient,
    draw_noise_block,
    monte_carlo_component,
    sample_gradient_estimates,
)
from .optimizer import (
    EuclideanBall,
    RunConfig,
    TraceRecord,
    lyapunov_reference_points,
    project,
    sgd_rr_run,
    sgd_run,
    stepsize_for_accuracy,
    stepsize_for_accuracy_quadratic_floor,
)
from .problems import (
    ProblemSpec,
    analytic_variance_oracle,
    global_optimum,
    make_quadratic_problem,
    make_reparam_problem,
    make_smoothing_erm_problem,
    objective_and_gradient,
    quadratic_problem_from_parts,
)
from .sampling import (
    EpochPartition,
    SubsamplingStrategy,
    draw_minibatch,
    effective_sample_size,
    inverse_effective_sample_size,
    reshuffle_partition,
    subsampling_unit_variance,
)
from .variance import (
    BatchScenario,
    ConstantsReport,
    VarianceReport,
    average_bregman_check,
    budget_sweep,
    bv_constants,
    corollary_variance,
    correlation_estimate,
    constants_report,
    doubly_stochastic_variance_bound,
    empirical_trace_variance,
    er_constants,
    expected_variance_lemma_check,
    gradient_norm_bound_audit,
    variance_report,
)
