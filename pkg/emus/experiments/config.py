"""Experiment configuration documents.

A config is one JSON file validated by ``ExperimentConfig``. Presets for the
tail-probability, low-temperature and mixture studies ship in ``presets/``.
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from emus.bias.cv import get_cv
from emus.bias.families import BiasSet, bias_from_descriptor, make_tail_family
from emus.config import settings
from emus.errors import ConfigError
from emus.estimation.marginals import HistogramGrid
from emus.sampling.dispatch import SamplerSpec
from emus.sampling.target import POTENTIALS, Domain, make_potential

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "presets"
PRESETS = ("tail", "lowtemp", "lowtemp15", "lowtemp30", "mixture")


# ============= Sections =============
class DomainSpec(BaseModel):
    kind: Literal["box", "periodic", "half_line", "unconstrained"] = "unconstrained"
    lo: float = 0.0
    hi: float = 1.0

    def build(self) -> Domain:
        return Domain(kind=self.kind, lo=self.lo, hi=self.hi)


class SyntheticDataSpec(BaseModel):
    n: int = Field(default=485, ge=2)
    means: List[float] = [70.0, 79.0, 100.0]
    sds: List[float] = [1.5, 2.0, 5.0]
    weights: List[float] = [0.35, 0.35, 0.3]
    seed: int = 0
    decimals: Optional[int] = 1


class MixtureSpec(BaseModel):
    K: int = Field(default=3, ge=2)
    data_path: Optional[str] = None
    synthetic: SyntheticDataSpec = SyntheticDataSpec()
    alpha: float = Field(default=2.0, gt=0)
    g: float = Field(default=0.2, gt=0)
    constrained: bool = True


class TargetSpec(BaseModel):
    """pi proportional to exp(-beta V), or the mixture posterior"""

    potential: str = "linear"
    params: Dict[str, Any] = Field(default_factory=dict)
    beta: float = Field(default=1.0, gt=0)
    dim: int = Field(default=1, ge=1)
    domain: DomainSpec = DomainSpec()
    mixture: Optional[MixtureSpec] = None

    @field_validator("potential")
    @classmethod
    def _known_potential(cls, v):
        if v != "mixture" and v not in POTENTIALS:
            raise ValueError(f"unknown potential '{v}'; choose from {sorted(POTENTIALS) + ['mixture']}")
        return v

    @model_validator(mode="after")
    def _mixture_section(self):
        if self.potential == "mixture" and self.mixture is None:
            raise ValueError("potential 'mixture' needs a `mixture` section")
        return self

    @property
    def is_mixture(self) -> bool:
        return self.potential == "mixture"

    def build_potential(self):
        if self.is_mixture:
            return None
        return make_potential(self.potential, **self.params)


class ObservableSpec(BaseModel):
    """Scalar observable g, optionally evaluated on a collective variable"""

    kind: Literal["one", "indicator_above", "indicator_below", "indicator_interval", "coordinate"] = "one"
    axis: int = Field(default=0, ge=0)
    threshold: float = 0.0
    lo: float = 0.0
    hi: float = 1.0
    cv: str = "identity"
    cv_params: Dict[str, Any] = Field(default_factory=dict)

    def build(self) -> Callable[[np.ndarray], np.ndarray]:
        cv_fn = get_cv(self.cv)
        params = dict(self.cv_params)

        def g(X: np.ndarray) -> np.ndarray:
            if self.kind == "one":
                return np.ones(np.asarray(X).shape[0])
            x = cv_fn(np.asarray(X, dtype=float), **params)[:, self.axis]
            if self.kind == "indicator_above":
                return (x >= self.threshold).astype(float)
            if self.kind == "indicator_below":
                return (x < self.threshold).astype(float)
            if self.kind == "indicator_interval":
                return ((x >= self.lo) & (x < self.hi)).astype(float)
            return x

        return g


class MarginalSpec(BaseModel):
    name: str
    cv: str = "identity"
    cv_params: Dict[str, Any] = Field(default_factory=dict)
    lo: List[float]
    hi: List[float]
    bins: List[int]

    def grid(self) -> HistogramGrid:
        return HistogramGrid(lo=tuple(self.lo), hi=tuple(self.hi), bins=tuple(self.bins))

    def cv_function(self) -> Callable[[np.ndarray], np.ndarray]:
        fn = get_cv(self.cv)
        params = dict(self.cv_params)
        return lambda X: fn(np.asarray(X, dtype=float), **params)


class ScheduleSpec(BaseModel):
    """Sequential initialization: anchor stratum and external seed points.

    Without an anchor, the stratum with the largest bias weight at the seed
    points is used. With ``pilot_steps`` the seed points are replaced by the
    states of a short unbiased run started from them.
    """

    anchor: Optional[int] = Field(default=None, ge=0)
    seed_points: Optional[List[List[float]]] = None
    pilot_steps: int = Field(default=0, ge=0)


class DirectSpec(BaseModel):
    """Unstratified reference runs at the stratified sample budget"""

    sampler: Optional[SamplerSpec] = None
    runs: int = Field(default=1, ge=1)
    total_samples: Optional[int] = Field(default=None, gt=0)


class ErrorSpec(BaseModel):
    enabled: bool = True
    bound_use: Optional[Literal["hitting", "overlap"]] = "hitting"
    bound_scale: Literal["abs_mean", "variance"] = "abs_mean"


# ============= Experiment =============
class ExperimentConfig(BaseModel):
    name: str
    experiment: Literal["tail", "lowtemp", "mixture", "custom"] = "custom"
    target: TargetSpec
    bias: Dict[str, Any]
    sampler: SamplerSpec
    observable: ObservableSpec = ObservableSpec()
    schedule: ScheduleSpec = ScheduleSpec()
    marginals: List[MarginalSpec] = []
    direct: Optional[DirectSpec] = None
    errors: ErrorSpec = ErrorSpec()
    iterative: bool = False
    reference: Literal["none", "analytic", "quadrature"] = "none"
    seed: int = 0
    replicates: int = Field(default=1, ge=1)
    max_workers: Optional[int] = Field(default=None, ge=1)
    save_trajectories: bool = False
    output_dir: Optional[str] = None

    @field_validator("bias")
    @classmethod
    def _bias_kind(cls, v):
        if "kind" not in v:
            raise ValueError("bias descriptor needs a `kind`")
        return v

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else settings.runs_dir / self.name

    def resolved_bias(self) -> Dict[str, Any]:
        """Bias descriptor with rule-based resolutions filled in.

        A ``tail`` family without ``K`` takes K = M * max ceil|V'| on [0, M];
        an ``indicator_grid`` without ``K`` takes K = strata_per_beta * ceil(beta)
        (strata_per_beta defaults to one).
        """
        desc = dict(self.bias)
        if desc["kind"] == "tail" and "K" not in desc:
            family = make_tail_family(float(desc["M"]), self.target.build_potential())
            desc["K"] = family.K
        elif desc["kind"] == "indicator_grid":
            per_beta = desc.pop("strata_per_beta", 1)
            if not (isinstance(per_beta, int) and per_beta >= 1):
                raise ValueError(f"strata_per_beta must be a positive integer, got {per_beta!r}")
            if "K" not in desc:
                desc["K"] = per_beta * int(math.ceil(self.target.beta))
            desc.setdefault("dim", self.target.dim)
        return desc

    def build_bias(self) -> BiasSet:
        return bias_from_descriptor(self.resolved_bias())

    def matched_budget(self, n_strata: int) -> int:
        return n_strata * self.sampler.samples_per_stratum()


# ============= Loading =============
def _config_error(e: ValidationError, prefix: Tuple[Any, ...] = ()) -> ConfigError:
    err = e.errors()[0]
    return ConfigError(err["msg"], prefix + tuple(err["loc"]))


def check_config(config: ExperimentConfig) -> BiasSet:
    """Cross-section checks that need the built bias family.

    Raises:
        ConfigError: with the offending field path
    """
    try:
        bias = config.build_bias()
    except ValidationError as e:
        raise _config_error(e, ("bias",))
    except (KeyError, ValueError) as e:
        raise ConfigError(str(e), ("bias",))

    if config.direct is not None and config.direct.total_samples is not None:
        budget = config.matched_budget(bias.n_strata)
        if config.direct.total_samples != budget:
            raise ConfigError(
                f"direct budget {config.direct.total_samples} does not match the stratified budget {budget}",
                ("direct", "total_samples"),
            )
    if config.sampler.kind == "iid" and (config.target.is_mixture or config.target.dim != 1):
        raise ConfigError("i.i.d. sampling needs a one-dimensional potential target", ("sampler", "kind"))
    for k, m in enumerate(config.marginals):
        try:
            m.grid()
            get_cv(m.cv)
        except ValidationError as e:
            raise _config_error(e, ("marginals", k))
        except KeyError as e:
            raise ConfigError(str(e), ("marginals", k, "cv"))
    return bias


def load_config(source: Union[str, Path, Dict[str, Any]]) -> ExperimentConfig:
    """Parse and validate an experiment config (path or already-parsed dict)"""
    if isinstance(source, dict):
        data = source
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {path}: {e}")
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise _config_error(e)
    check_config(config)
    return config


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'; choose from {list(PRESETS)}", ("preset",))
    return load_config(PRESET_DIR / f"{name}.json")


def with_overrides(
    config: ExperimentConfig,
    replicates: Optional[int] = None,
    seed: Optional[int] = None,
    out: Optional[str] = None,
) -> ExperimentConfig:
    """Copy of ``config`` with command-line overrides applied and re-validated"""
    data = config.model_dump()
    if replicates is not None:
        data["replicates"] = replicates
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["output_dir"] = str(out)
    return load_config(data)
