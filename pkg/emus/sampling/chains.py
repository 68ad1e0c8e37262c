"""Per-stratum samplers: random-walk Metropolis, (reflected) Langevin and
i.i.d. inverse-CDF draws.

Every sampler targets pi_i proportional to psi_i * pi and returns a
``Trajectory``. Randomness comes from ``numpy.random.default_rng`` seeded
with an int or a ``SeedSequence``; identical seeds give identical output.
"""
from dataclasses import dataclass, field
import logging
import math
from typing import Any, Dict, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import integrate, stats

from emus.bias.families import BiasSet
from emus.config import settings
from emus.errors import SamplingError
from emus.sampling.target import Linear, Quadratic, TargetModel

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence, None]


def stratum_seed(base: int, stratum: int, replicate: int = 0) -> np.random.SeedSequence:
    """Independent stream for one (replicate, stratum) pair"""
    return np.random.SeedSequence([int(base), int(replicate), int(stratum)])


@dataclass
class Trajectory:
    """States emitted by one sampler run, after burn-in and thinning"""

    states: np.ndarray
    stratum: Optional[int]
    sampler: str
    seed: Any = None
    acceptance_rate: float = 1.0
    burn_in: int = 0
    thin: int = 1
    n_walkers: int = 1
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise ValueError(f"acceptance rate {self.acceptance_rate} outside [0, 1]")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def n_sweeps(self) -> int:
        return len(self) // self.n_walkers

    def metadata(self) -> Dict[str, Any]:
        seed = self.seed
        if isinstance(seed, np.random.SeedSequence):
            seed = {"entropy": seed.entropy, "spawn_key": list(seed.spawn_key)}
        return {
            "stratum": self.stratum,
            "sampler": self.sampler,
            "seed": seed,
            "acceptance_rate": self.acceptance_rate,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "n_walkers": self.n_walkers,
            "n_states": len(self),
            "params": self.params,
        }


class StratumDensity:
    """log(psi_i * pi), vectorized; -inf off the stratum"""

    def __init__(self, target: TargetModel, bias: Optional[BiasSet], stratum: Optional[int]):
        self.target = target
        self.bias = bias
        self.stratum = stratum

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.target.dim)
        logp = self.target.logp(X)
        if self.bias is None:
            return logp
        psi = self.bias.component(X, self.stratum, strict=False)
        with np.errstate(divide="ignore"):
            return np.where(psi > 0, logp + np.log(psi), -np.inf)

    def in_support(self, X: np.ndarray) -> np.ndarray:
        return np.isfinite(self(X))


def _start(density: StratumDensity, x0: Any, stratum: Optional[int]) -> np.ndarray:
    x = np.asarray(x0, dtype=float).reshape(1, density.target.dim)
    lp = density(x)[0]
    if np.isnan(lp) or lp == np.inf:
        raise SamplingError("non-finite log density at the initial state", stratum, x[0])
    if lp == -np.inf:
        raise SamplingError("initial state lies outside the stratum", stratum, x[0])
    return x


def _validate_run(n: int, burn_in: int, thin: int) -> None:
    if n < 1:
        raise ValueError("`n` must be at least 1")
    if burn_in < 0:
        raise ValueError("`burn_in` must be 0 or greater")
    if thin < 1:
        raise ValueError("`thin` must be 1 or greater")


# ============= Random-walk Metropolis =============
def rwm_chain(
    target: TargetModel,
    bias: Optional[BiasSet],
    stratum: Optional[int],
    x0: Any,
    n: int,
    step: float,
    seed: Seed = None,
    burn_in: int = 0,
    thin: Optional[int] = None,
) -> Trajectory:
    """Random-walk Metropolis with N(0, step^2) proposals for psi_i * pi.

    Proposals leaving the stratum or the target domain have density zero and
    are rejected. ``n`` counts kept states.
    """
    thin = thin or settings.thin
    _validate_run(n, burn_in, thin)
    if not step > 0:
        raise ValueError("`step` must be positive")
    density = StratumDensity(target, bias, stratum)
    x = _start(density, x0, stratum)[0]
    lp = density(x)[0]
    rng = np.random.default_rng(seed)
    total = burn_in + n * thin
    noise = rng.normal(scale=step, size=(total, target.dim))
    logu = np.log(rng.random(total))
    domain = target.domain

    out = np.empty((n, target.dim))
    accepted = 0
    for t in range(total):
        y = domain.wrap((x + noise[t])[None, :])[0]
        lp_y = density(y)[0]
        if logu[t] < lp_y - lp:
            x, lp = y, lp_y
            if t >= burn_in:
                accepted += 1
        if t >= burn_in and (t - burn_in) % thin == thin - 1:
            out[(t - burn_in) // thin] = x

    rate = accepted / max(total - burn_in, 1)
    logger.debug(f"rwm stratum={stratum} acceptance={rate:.3f}")
    return Trajectory(
        states=out, stratum=stratum, sampler="rwm", seed=seed, acceptance_rate=rate,
        burn_in=burn_in, thin=thin, params={"step": step},
    )


# ============= Langevin =============
def _fold(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Mirror-fold x into [lo, hi] per coordinate; handles repeated reflections"""
    width = hi - lo
    out = x.copy()
    bounded = np.isfinite(lo) & np.isfinite(hi)
    if bounded.any():
        y = np.mod(x[bounded] - lo[bounded], 2.0 * width[bounded])
        y = np.where(y > width[bounded], 2.0 * width[bounded] - y, y)
        out[bounded] = lo[bounded] + y
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    out[only_lo] = lo[only_lo] + np.abs(x[only_lo] - lo[only_lo])
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    out[only_hi] = hi[only_hi] - np.abs(hi[only_hi] - x[only_hi])
    return out


def _stratum_box(bias: BiasSet, stratum: int):
    if not (bias.piecewise_constant and bias.boxes_in_state_space):
        raise ValueError("Reflected Langevin requires a piecewise-constant box stratum")
    lo, hi = bias.support_boxes()
    return lo[stratum].astype(float), hi[stratum].astype(float)


def langevin_chain(
    target: TargetModel,
    bias: Optional[BiasSet],
    stratum: Optional[int],
    x0: Any,
    n: int,
    dt: Optional[float] = None,
    seed: Seed = None,
    reflected: bool = False,
    burn_in: int = 0,
    thin: Optional[int] = None,
    metropolize: Optional[bool] = None,
) -> Trajectory:
    """Euler-Maruyama discretization of dX = grad log(psi_i pi) dt + sqrt(2) dW.

    Indicator strata use grad log pi only. Unreflected steps that leave the
    stratum are rejected; for strata that are not piecewise constant the
    proposal is Metropolis-adjusted (MALA) unless ``metropolize`` says
    otherwise. With ``reflected`` each step is mirror-folded back into the
    stratum box.
    """
    dt = dt or settings.langevin_dt
    thin = thin or settings.thin
    _validate_run(n, burn_in, thin)
    if not dt > 0:
        raise ValueError("`dt` must be positive")
    if target.grad_log_density is None:
        raise ValueError("langevin_chain needs the gradient of the log density")
    density = StratumDensity(target, bias, stratum)
    x = _start(density, x0, stratum)[0]
    smooth_bias = bias is not None and not bias.piecewise_constant
    if metropolize is None:
        metropolize = smooth_bias and not reflected
    period = target.domain.period
    if target.domain.kind == "periodic":
        wrap = lambda Y: target.domain.wrap(Y)
    elif bias is not None and not np.all(np.isnan(bias.periods)):
        period = float(np.nanmax(bias.periods))
        wrap = lambda Y: _wrap(Y, bias)
    else:
        wrap = None

    box = None
    if reflected:
        if bias is None:
            raise ValueError("Reflected Langevin requires a stratum")
        box = _stratum_box(bias, stratum)
        if period is not None:
            # unwrap the start next to the stratum centre
            centre = 0.5 * (box[0] + box[1])
            x = x - period * np.round((x - centre) / period)

    def drift(y: np.ndarray) -> np.ndarray:
        d = target.grad_logp(y[None, :])[0]
        if smooth_bias:
            extra = bias.grad_log_component(y[None, :], stratum)
            if extra is not None:
                d = d + extra[0]
        if not np.all(np.isfinite(d)):
            raise SamplingError("non-finite drift", stratum, y)
        return d

    rng = np.random.default_rng(seed)
    total = burn_in + n * thin
    xi = rng.standard_normal(size=(total, target.dim))
    logu = np.log(rng.random(total)) if metropolize else None
    scale = math.sqrt(2.0 * dt)

    out = np.empty((n, target.dim))
    accepted = 0
    d_x = drift(x)
    lp = density(x)[0]
    for t in range(total):
        y = x + dt * d_x + scale * xi[t]
        if box is not None:
            y = _fold(y, *box)
            x, d_x = y, drift(y)
            accepted += t >= burn_in
        else:
            if wrap is not None:
                y = wrap(y[None, :])[0]
            lp_y = density(y)[0]
            ok = np.isfinite(lp_y)
            if ok and metropolize:
                d_y = drift(y)
                fwd = np.sum((y - x - dt * d_x) ** 2) / (4.0 * dt)
                bwd = np.sum((x - y - dt * d_y) ** 2) / (4.0 * dt)
                ok = logu[t] < lp_y - lp + fwd - bwd
            if ok:
                x, lp = y, lp_y
                d_x = d_y if metropolize else drift(y)
                accepted += t >= burn_in
        if t >= burn_in and (t - burn_in) % thin == thin - 1:
            out[(t - burn_in) // thin] = x

    if box is not None and wrap is not None:
        out = wrap(out)
    rate = accepted / max(total - burn_in, 1)
    return Trajectory(
        states=out, stratum=stratum, sampler="langevin", seed=seed, acceptance_rate=rate,
        burn_in=burn_in, thin=thin,
        params={"dt": dt, "reflected": reflected, "metropolize": bool(metropolize)},
    )


def _wrap(X: np.ndarray, bias: BiasSet) -> np.ndarray:
    """Wrap coordinates into the bias family's periodic cell"""
    lo = getattr(bias, "lo", 0.0)
    periods = bias.periods
    P = np.where(np.isnan(periods), np.inf, periods)
    wrapped = lo + np.mod(X - lo, np.where(np.isfinite(P), P, 1.0))
    return np.where(np.isfinite(P), wrapped, X)


# ============= i.i.d. strata =============
class AnalyticStratumDensity(BaseModel):
    """Density proportional to exp(-V) on [lo, hi] with V linear or quadratic.

    ``exponential``: V = rate * x. ``gaussian``: V = (x - mean)^2 / (2 sd^2).
    ``uniform``: V constant.
    """

    model_config = ConfigDict(frozen=True)

    form: Literal["exponential", "gaussian", "uniform"]
    lo: float
    hi: float = math.inf
    rate: float = 1.0
    mean: float = 0.0
    sd: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if not self.hi > self.lo:
            raise ValueError("hi must exceed lo")
        if self.form == "uniform" and not math.isfinite(self.hi - self.lo):
            raise ValueError("uniform stratum density needs a bounded interval")
        if self.form == "exponential":
            if self.rate == 0 or (self.rate < 0 and not math.isfinite(self.hi)):
                raise ValueError("exponential stratum density needs a normalizable rate")
        if self.form == "gaussian" and not self.sd > 0:
            raise ValueError("sd must be positive")
        return self

    def ppf(self, u: np.ndarray) -> np.ndarray:
        if self.form == "uniform":
            return self.lo + u * (self.hi - self.lo)
        if self.form == "exponential":
            r = self.rate
            mass = -np.expm1(-r * (self.hi - self.lo))
            return self.lo - np.log1p(-u * mass) / r
        a, b = (self.lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd
        return stats.truncnorm.ppf(u, a, b, loc=self.mean, scale=self.sd)

    def mean_value(self) -> float:
        """Closed-form mean of the restricted density"""
        if self.form == "uniform":
            return 0.5 * (self.lo + self.hi)
        if self.form == "exponential":
            r, w = self.rate, self.hi - self.lo
            if not math.isfinite(w):
                return self.lo + 1.0 / r
            return self.lo + 1.0 / r - w / math.expm1(r * w)
        a, b = (self.lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd
        return float(stats.truncnorm.mean(a, b, loc=self.mean, scale=self.sd))


@dataclass(frozen=True)
class TabulatedStratumDensity:
    """exp(-beta V) on a bounded [lo, hi] through a tabulated CDF.

    The CDF is the cumulative trapezoid rule on ``grid``; ``ppf`` inverts it
    by linear interpolation.
    """

    lo: float
    hi: float
    grid: np.ndarray
    cdf: np.ndarray

    @classmethod
    def from_potential(cls, potential, beta: float, lo: float, hi: float, n: int = 4097) -> "TabulatedStratumDensity":
        if not (math.isfinite(lo) and math.isfinite(hi) and hi > lo):
            raise ValueError("tabulated stratum density needs a bounded interval")
        x = np.linspace(lo, hi, n)
        logw = -beta * potential.value(x[:, None])
        cdf = integrate.cumulative_trapezoid(np.exp(logw - logw.max()), x, initial=0.0)
        return cls(lo=lo, hi=hi, grid=x, cdf=cdf / cdf[-1])

    def ppf(self, u: np.ndarray) -> np.ndarray:
        return np.interp(u, self.cdf, self.grid)

    def mean_value(self) -> float:
        # E[x] = hi - int_lo^hi CDF(x) dx
        return float(self.hi - integrate.trapezoid(self.cdf, self.grid))

    def model_dump(self) -> Dict[str, Any]:
        return {"form": "tabulated", "lo": self.lo, "hi": self.hi, "points": int(self.grid.size)}


def analytic_stratum_density(
    potential, beta: float, bias: BiasSet, stratum: int
) -> Union[AnalyticStratumDensity, TabulatedStratumDensity]:
    """Restriction of exp(-beta V) to a 1-D piecewise-constant stratum.

    Linear and quadratic potentials get closed-form inverse CDFs; any other
    potential with a ``value`` method is tabulated on its bounded stratum.
    """
    if not (bias.piecewise_constant and bias.boxes_in_state_space):
        raise ValueError("i.i.d. stratum sampling needs a piecewise-constant box stratum")
    lo, hi = bias.support_boxes()
    if lo.shape[1] != 1:
        raise ValueError("i.i.d. stratum sampling is one-dimensional")
    a, b = float(lo[stratum, 0]), float(hi[stratum, 0])
    if isinstance(potential, Linear):
        return AnalyticStratumDensity(form="exponential", lo=a, hi=b, rate=beta * potential.slope)
    if isinstance(potential, Quadratic):
        sd = 1.0 / math.sqrt(beta * potential.stiffness)
        return AnalyticStratumDensity(form="gaussian", lo=a, hi=b, mean=potential.center, sd=sd)
    if hasattr(potential, "value") and math.isfinite(b - a):
        return TabulatedStratumDensity.from_potential(potential, beta, a, b)
    raise ValueError(f"No inverse CDF for potential {type(potential).__name__}")


def iid_chain(
    density: Union[AnalyticStratumDensity, TabulatedStratumDensity],
    n: int,
    seed: Seed = None,
    stratum: Optional[int] = None,
) -> Trajectory:
    """n independent inverse-CDF draws from a 1-D analytic stratum density"""
    if not isinstance(density, (AnalyticStratumDensity, TabulatedStratumDensity)):
        raise ValueError(f"Unsupported stratum density {density!r}")
    _validate_run(n, 0, 1)
    rng = np.random.default_rng(seed)
    x = density.ppf(rng.random(n))
    # guard against rounding at the interval ends
    x = np.clip(x, density.lo, np.nextafter(density.hi, -np.inf))
    return Trajectory(
        states=x[:, None], stratum=stratum, sampler="iid", seed=seed,
        params=density.model_dump(),
    )


def pick_start(candidates: np.ndarray, density: StratumDensity, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Draw ``size`` in-support points uniformly (with replacement) from candidates"""
    candidates = np.asarray(candidates, dtype=float).reshape(-1, density.target.dim)
    inside = candidates[density.in_support(candidates)]
    if inside.shape[0] == 0:
        raise SamplingError("no candidate start point lies in the stratum", density.stratum)
    return inside[rng.integers(0, inside.shape[0], size=size)]
