"""Config-driven sampler selection for stratified and direct runs."""
import logging
import math
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from emus.bias.families import BiasSet
from emus.sampling.chains import (
    AnalyticStratumDensity,
    Seed,
    Trajectory,
    analytic_stratum_density,
    iid_chain,
    langevin_chain,
    rwm_chain,
)
from emus.sampling.ensemble import ensemble_chain
from emus.sampling.target import Linear, Quadratic, TargetModel

logger = logging.getLogger(__name__)


class SamplerSpec(BaseModel):
    """Sampler settings shared by every stratum of a run.

    ``steps`` counts every step (or ensemble sweep) including burn-in; the
    number of kept states per stratum is (steps - burn_in) // thin.
    """

    kind: Literal["rwm", "langevin", "ensemble", "iid"] = "rwm"
    steps: int = Field(gt=0)
    burn_in: int = Field(default=0, ge=0)
    thin: int = Field(default=1, ge=1)
    step: float = Field(default=0.1, gt=0)
    dt: Optional[float] = Field(default=None, gt=0)
    walkers: int = Field(default=2, ge=2)
    a: Optional[float] = Field(default=None, gt=1)
    reflected: bool = False
    metropolize: Optional[bool] = None

    @model_validator(mode="after")
    def _check_budget(self):
        if self.steps <= self.burn_in:
            raise ValueError("steps must exceed burn_in")
        if (self.steps - self.burn_in) // self.thin < 1:
            raise ValueError("thin leaves no kept states")
        return self

    @property
    def kept(self) -> int:
        return (self.steps - self.burn_in) // self.thin

    @property
    def n_starts(self) -> int:
        return self.walkers if self.kind == "ensemble" else 1

    def samples_per_stratum(self) -> int:
        return self.kept * self.n_starts


def run_chain(
    spec: SamplerSpec,
    target: TargetModel,
    bias: Optional[BiasSet],
    stratum: Optional[int],
    starts: Any,
    seed: Seed = None,
    potential=None,
    beta: float = 1.0,
) -> Trajectory:
    """Run the sampler named by ``spec`` on stratum ``stratum`` (or on pi).

    Args:
        starts: start points, shape (n_starts, dim); i.i.d. runs ignore them
        potential, beta: needed by ``kind="iid"`` for the inverse CDF
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, target.dim) if starts is not None else None
    if spec.kind == "iid":
        if potential is None:
            raise ValueError("i.i.d. sampling needs the potential")
        if bias is None:
            density = direct_density(potential, beta, target)
        else:
            density = analytic_stratum_density(potential, beta, bias, stratum)
        return iid_chain(density, spec.kept, seed, stratum)
    if starts is None or starts.shape[0] < spec.n_starts:
        raise ValueError(f"{spec.kind} needs {spec.n_starts} start points")
    if spec.kind == "rwm":
        return rwm_chain(target, bias, stratum, starts[0], spec.kept, spec.step, seed, spec.burn_in, spec.thin)
    if spec.kind == "langevin":
        return langevin_chain(
            target, bias, stratum, starts[0], spec.kept, spec.dt, seed,
            reflected=spec.reflected, burn_in=spec.burn_in, thin=spec.thin, metropolize=spec.metropolize,
        )
    return ensemble_chain(
        target, bias, stratum, spec.walkers, starts[:spec.walkers], spec.kept,
        a=spec.a, seed=seed, burn_in=spec.burn_in, thin=spec.thin,
    )


def direct_density(potential, beta: float, target: TargetModel) -> AnalyticStratumDensity:
    """Inverse-CDF density of the unbiased target, for i.i.d. reference runs"""
    domain = target.domain
    lo = domain.lo if domain.kind in ("box", "half_line") else -math.inf
    hi = domain.hi if domain.kind == "box" else math.inf
    if isinstance(potential, Linear):
        return AnalyticStratumDensity(form="exponential", lo=lo, hi=hi, rate=beta * potential.slope)
    if isinstance(potential, Quadratic):
        sd = 1.0 / math.sqrt(beta * potential.stiffness)
        return AnalyticStratumDensity(form="gaussian", lo=lo, hi=hi, mean=potential.center, sd=sd)
    raise ValueError(f"No inverse CDF for potential {type(potential).__name__}")


def direct_chain(
    spec: SamplerSpec,
    target: TargetModel,
    starts: Any,
    seed: Seed = None,
    potential=None,
    beta: float = 1.0,
    kept: Optional[int] = None,
) -> Trajectory:
    """Unstratified run of the same sampler, for comparisons at a matched budget.

    ``kept`` overrides the number of kept states (sweeps for an ensemble).
    """
    if kept is not None:
        spec = spec.model_copy(update={"steps": spec.burn_in + kept * spec.thin})
    traj = run_chain(spec, target, None, None, starts, seed, potential, beta)
    logger.info(f"Direct {spec.kind} run: {len(traj)} states, acceptance {traj.acceptance_rate:.3f}")
    return traj
