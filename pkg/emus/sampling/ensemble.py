"""Affine-invariant ensemble sampler (Goodman-Weare stretch move).

Walkers are split into two halves; each half is updated in one vectorized
step using partners drawn from the other half, so every sweep is a valid
Metropolis-Hastings update of the full ensemble.
"""
import logging
from typing import Any, Optional

import numpy as np

from emus.bias.families import BiasSet
from emus.config import settings
from emus.errors import SamplingError
from emus.sampling.chains import Seed, StratumDensity, Trajectory, _validate_run
from emus.sampling.target import TargetModel

logger = logging.getLogger(__name__)


def _stretch_factors(rng: np.random.Generator, a: float, size: int) -> np.ndarray:
    """Draws from g(z) proportional to 1/sqrt(z) on [1/a, a]"""
    return ((a - 1.0) * rng.random(size) + 1.0) ** 2 / a


def ensemble_chain(
    target: TargetModel,
    bias: Optional[BiasSet],
    stratum: Optional[int],
    walkers: int,
    x0s: Any,
    n: int,
    a: Optional[float] = None,
    seed: Seed = None,
    burn_in: int = 0,
    thin: Optional[int] = None,
) -> Trajectory:
    """Stretch-move ensemble targeting psi_i * pi.

    Args:
        walkers: number of walkers (at least 2; 2*dim or more recommended)
        x0s: initial walker positions, shape (walkers, dim), all in the stratum
        n: number of kept sweeps
        a: stretch parameter (default ``settings.stretch_a``)
        burn_in: discarded sweeps
        thin: keep every ``thin``-th sweep

    Returns:
        Trajectory whose states are the walker positions concatenated
        sweep by sweep, shape (n * walkers, dim)
    """
    a = a or settings.stretch_a
    thin = thin or settings.thin
    _validate_run(n, burn_in, thin)
    if walkers < 2:
        raise ValueError("`walkers` must be at least 2")
    if not a > 1.0:
        raise ValueError("`a` must exceed 1")
    dim = target.dim
    X = np.array(x0s, dtype=float).reshape(-1, dim)
    if X.shape[0] != walkers:
        raise ValueError(f"`x0s` must have shape ({walkers}, {dim}), got {X.shape}")
    if walkers < 2 * dim:
        logger.warning(f"stratum {stratum}: {walkers} walkers for dimension {dim}; at least {2 * dim} recommended")
    if np.all(X == X[0]):
        raise SamplingError("degenerate ensemble: all walkers start at the same point", stratum, X[0])

    density = StratumDensity(target, bias, stratum)
    lp = density(X)
    bad = ~np.isfinite(lp)
    if bad.any():
        raise SamplingError("initial walker outside the stratum", stratum, X[np.flatnonzero(bad)[0]])

    rng = np.random.default_rng(seed)
    halves = (np.arange(0, walkers // 2), np.arange(walkers // 2, walkers))
    total = burn_in + n * thin
    out = np.empty((n, walkers, dim))
    accepted = 0
    for t in range(total):
        for s in (0, 1):
            active, partners = halves[s], halves[1 - s]
            z = _stretch_factors(rng, a, active.size)
            pick = partners[rng.integers(0, partners.size, size=active.size)]
            Y = X[pick] + z[:, None] * (X[active] - X[pick])
            if target.domain.kind == "periodic":
                Y = target.domain.wrap(Y)
            lp_y = density(Y)
            log_ratio = (dim - 1) * np.log(z) + lp_y - lp[active]
            accept = np.log(rng.random(active.size)) < log_ratio
            X[active[accept]] = Y[accept]
            lp[active[accept]] = lp_y[accept]
            if t >= burn_in:
                accepted += int(accept.sum())
        if t >= burn_in and (t - burn_in) % thin == thin - 1:
            out[(t - burn_in) // thin] = X

    rate = accepted / max((total - burn_in) * walkers, 1)
    logger.debug(f"ensemble stratum={stratum} acceptance={rate:.3f}")
    return Trajectory(
        states=out.reshape(n * walkers, dim), stratum=stratum, sampler="ensemble", seed=seed,
        acceptance_rate=rate, burn_in=burn_in, thin=thin, n_walkers=walkers,
        params={"a": a, "walkers": walkers},
    )


def walker_means(traj: Trajectory, values: np.ndarray) -> np.ndarray:
    """Average per-state values over walkers within each sweep.

    ``values`` has shape (len(traj),) or (len(traj), k). The result is a
    time series with one entry per sweep.
    """
    values = np.asarray(values, dtype=float)
    shape = (traj.n_sweeps, traj.n_walkers) + values.shape[1:]
    return values.reshape(shape).mean(axis=1)
