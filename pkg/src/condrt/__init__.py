"""Conditional randomization tests over finite assignment spaces."""

__version__ = "0.1.0"

from .assignment import (
    AssignmentModel,
    ObservedData,
    OutcomeSchedule,
    build_bernoulli,
    build_complete_randomization,
    build_crossover_orders,
    build_iid,
    build_uniform_permutations,
    restrict,
    sample,
)
from .conditioning import (
    Biclique,
    ConditioningRejection,
    ConditioningVariable,
    NullExposureGraph,
    Partition,
    bayes_conditional_density,
    biclique_decomposition,
    build_null_exposure_graph,
    count_treated,
    deterministic_variable,
    independent_variable,
    intersection_units,
    partition_by_focal_units,
    partition_by_function,
    partition_by_order_statistics,
    partition_from_bicliques,
    partition_from_labels,
    partition_variable,
    randomized_partition_choice,
    validate_conditioning_map,
    whole_space,
)
from .engine import (
    LARGE,
    SMALL,
    PValueReport,
    StatContext,
    Statistic,
    averaged_p_value,
    exact_p_value,
    lemma2_equivalence_check,
    mc_p_value,
    post_randomized_p_value,
)
from .hypothesis import (
    ExposureMap,
    NullHypothesis,
    PartialOutcomes,
    constant_effect_null,
    custom_null,
    fisher_sharp_null,
    level_set_null,
    neighborhood_exposure,
    spillover_null,
    stepped_wedge_exposure,
    treatment_exposure,
)
from .inference import InversionResult, invert_constant_effect
from .statistics import (
    DesignMatrixSpec,
    diff_in_means,
    difference_in_means,
    exposure_regression,
    get_statistic,
    ols_exposure_coeff,
    register_statistic,
)
