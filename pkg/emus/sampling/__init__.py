from emus.sampling.target import (
    TargetModel, Domain, Linear, Quadratic, Cosine, DoubleWell, Flat,
    make_potential, target_from_potential, quadrature_expectation,
)
from emus.sampling.chains import (
    Trajectory, AnalyticStratumDensity, TabulatedStratumDensity, StratumDensity,
    rwm_chain, langevin_chain, iid_chain, analytic_stratum_density, stratum_seed, pick_start,
)
from emus.sampling.ensemble import ensemble_chain, walker_means
from emus.sampling.dispatch import SamplerSpec, run_chain, direct_chain

__all__ = [
    "TargetModel",
    "Domain",
    "Linear",
    "Quadratic",
    "Cosine",
    "DoubleWell",
    "Flat",
    "make_potential",
    "target_from_potential",
    "quadrature_expectation",
    "Trajectory",
    "AnalyticStratumDensity",
    "TabulatedStratumDensity",
    "StratumDensity",
    "rwm_chain",
    "langevin_chain",
    "iid_chain",
    "analytic_stratum_density",
    "stratum_seed",
    "pick_start",
    "ensemble_chain",
    "walker_means",
    "SamplerSpec",
    "run_chain",
    "direct_chain",
]
