from emus.estimation.estimator import (
    StratumStats, OverlapMatrix, WeightVector, EstimateReport, EmusResult,
    accumulate, accumulate_all, build_overlap, stationary_vector, restrict_to_component,
    emus_estimate, iterative_emus, estimate_report, run_emus,
)
from emus.estimation.error_analysis import (
    GroupInverse, StratumCovariance, VarianceReport, DirectEstimate,
    group_inverse, derivative_direction, log_weight_derivatives, integrated_autocov,
    stratum_covariance, sigma2_us, hitting_probabilities, variance_upper_bound,
    emus_error_report, direct_estimate, replicate_variance,
)
from emus.estimation.marginals import (
    HistogramGrid, MarginalReport, InitSchedule,
    estimate_marginal, direct_marginal, build_schedule, run_stratified,
)

__all__ = [
    "StratumStats",
    "OverlapMatrix",
    "WeightVector",
    "EstimateReport",
    "EmusResult",
    "accumulate",
    "accumulate_all",
    "build_overlap",
    "stationary_vector",
    "restrict_to_component",
    "emus_estimate",
    "iterative_emus",
    "estimate_report",
    "run_emus",
    "GroupInverse",
    "StratumCovariance",
    "VarianceReport",
    "DirectEstimate",
    "group_inverse",
    "derivative_direction",
    "log_weight_derivatives",
    "integrated_autocov",
    "stratum_covariance",
    "sigma2_us",
    "hitting_probabilities",
    "variance_upper_bound",
    "emus_error_report",
    "direct_estimate",
    "replicate_variance",
    "HistogramGrid",
    "MarginalReport",
    "InitSchedule",
    "estimate_marginal",
    "direct_marginal",
    "build_schedule",
    "run_stratified",
]
