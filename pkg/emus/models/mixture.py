"""Hierarchical Bayesian Gaussian mixture posterior.

Model: y_i ~ sum_k q_k N(mu_k, 1/lambda_k), with priors
mu_k ~ N(m, 1/kappa), lambda_k ~ Gamma(alpha, beta), beta ~ Gamma(g, h) and
(q_1, ..., q_{K-1}) ~ Dirichlet_K(1, ..., 1). Hyperparameters follow the
data: m = M, kappa = 4 / R^2, alpha = 2, g = 0.2, h = 100 g / (alpha R^2),
with M the mean and R the range of the data.

Samplers work on the vector (mu_1..mu_K, log lambda_1..log lambda_K,
q_1..q_{K-1}, log beta); the density in those coordinates carries the
Jacobian of the log transforms.
"""
from dataclasses import dataclass
import json
import logging
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import gammaln, logsumexp

from emus.bias.families import BiasSet
from emus.sampling.target import Domain, TargetModel

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


# ============= Data =============
@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    source: str = ""

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        if y.size < 1:
            raise ValueError("Dataset needs at least one value")
        if not np.all(np.isfinite(y)):
            raise ValueError("Dataset values must be finite")
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def R(self) -> float:
        return float(self.y.max() - self.y.min())

    @property
    def M(self) -> float:
        return float(self.y.mean())

    def frequency_table(self) -> pd.DataFrame:
        """Counts of exactly equal values, most frequent first"""
        counts = pd.Series(self.y).value_counts(sort=True)
        return pd.DataFrame({"value": counts.index.to_numpy(), "count": counts.to_numpy()})

    def validation_report(self) -> dict:
        return {
            "source": self.source,
            "n": self.n,
            "min": float(self.y.min()),
            "max": float(self.y.max()),
            "range": self.R,
            "mean": self.M,
            "distinct": int(np.unique(self.y).size),
        }


@dataclass(frozen=True)
class Hyperparameters:
    m: float
    kappa: float
    alpha: float
    g: float
    h: float


def hyperparameters(data: Dataset, K: int, alpha: float = 2.0, g: float = 0.2) -> Hyperparameters:
    """Data-dependent prior settings m = M, kappa = 4/R^2, h = 100 g/(alpha R^2)"""
    if K < 1:
        raise ValueError("`K` must be at least 1")
    R = data.R
    if not R > 0:
        raise ValueError("Dataset range must be positive")
    return Hyperparameters(m=data.M, kappa=4.0 / R ** 2, alpha=alpha, g=g, h=100.0 * g / (alpha * R ** 2))


def synthetic_dataset(
    K: int = 3,
    n: int = 485,
    means: Sequence[float] = (70.0, 79.0, 100.0),
    sds: Sequence[float] = (1.5, 2.0, 5.0),
    weights: Sequence[float] = (0.35, 0.35, 0.3),
    seed: Optional[int] = None,
    decimals: Optional[int] = 1,
) -> Dataset:
    """Draw n values from a K-component Gaussian mixture.

    Rounding to ``decimals`` makes repeated values occur, as in discretized
    measurements.
    """
    means, sds, weights = (np.asarray(a, dtype=float)[:K] for a in (means, sds, weights))
    if means.size != K or sds.size != K or weights.size != K:
        raise ValueError("means, sds and weights need K entries")
    rng = np.random.default_rng(seed)
    comp = rng.choice(K, size=n, p=weights / weights.sum())
    y = rng.normal(means[comp], sds[comp])
    if decimals is not None:
        y = np.round(y, decimals)
    return Dataset(y=y, source=f"synthetic(K={K}, n={n}, seed={seed})")


# ============= Parameters =============
@dataclass(frozen=True)
class MixtureParams:
    mu: np.ndarray
    lam: np.ndarray
    q: np.ndarray
    beta: float

    def __post_init__(self):
        for name in ("mu", "lam", "q"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.lam.size != self.mu.size or self.q.size != self.mu.size - 1:
            raise ValueError("Need K means, K precisions and K-1 weights")

    @property
    def K(self) -> int:
        return self.mu.size

    def full_weights(self) -> np.ndarray:
        return np.append(self.q, 1.0 - self.q.sum())

    def violations(self) -> Optional[str]:
        """Reason the parameters leave the support, or None"""
        if np.any(self.lam <= 0):
            return "nonpositive precision"
        if not self.beta > 0:
            return "nonpositive beta"
        if np.any(self.q < 0) or self.q.sum() > 1:
            return "weights off the simplex"
        return None

    def permuted(self, order: Sequence[int]) -> "MixtureParams":
        order = np.asarray(order)
        full = self.full_weights()[order]
        return MixtureParams(mu=self.mu[order], lam=self.lam[order], q=full[:-1], beta=self.beta)

    def to_vector(self) -> np.ndarray:
        """(mu, log lambda, q_1..q_{K-1}, log beta)"""
        return np.concatenate([self.mu, np.log(self.lam), self.q, [math.log(self.beta)]])

    @classmethod
    def from_vector(cls, theta: Sequence[float], K: int) -> "MixtureParams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != 3 * K:
            raise ValueError(f"Parameter vector for K={K} must have {3 * K} entries, got {theta.size}")
        return cls(mu=theta[:K], lam=np.exp(theta[K:2 * K]), q=theta[2 * K:3 * K - 1], beta=float(np.exp(theta[-1])))

    def to_json(self) -> str:
        return json.dumps({"mu": self.mu.tolist(), "lambda": self.lam.tolist(), "q": self.q.tolist(), "beta": self.beta})

    @classmethod
    def from_json(cls, text: str) -> "MixtureParams":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid parameter JSON: {e}")
        return cls(mu=data["mu"], lam=data["lambda"], q=data["q"], beta=data["beta"])


# ============= Densities =============
def _log_post_rows(
    mu: np.ndarray,
    lam: np.ndarray,
    q_full: np.ndarray,
    beta: np.ndarray,
    y: np.ndarray,
    hp: Hyperparameters,
    constrained: bool,
) -> np.ndarray:
    """Unnormalized log posterior for parameter rows of shape (n, K)"""
    n_rows, K = mu.shape
    out = np.full(n_rows, -np.inf)
    ok = np.all((lam > 0) & np.isfinite(lam), axis=1) & (beta > 0) & np.isfinite(beta) & np.all(q_full >= 0, axis=1)
    if constrained:
        ok &= np.all(np.diff(mu, axis=1) >= 0, axis=1)
    if not ok.any():
        return out
    mu, lam, q_full, beta = mu[ok], lam[ok], q_full[ok], beta[ok]
    log_lam = np.log(lam)
    const = (
        0.5 * K * math.log(hp.kappa) + hp.g * math.log(hp.h)
        - K * gammaln(hp.alpha) - gammaln(hp.g) - 0.5 * (y.size + K) * LOG_2PI
    )
    prior = (
        (K * hp.alpha + hp.g - 1.0) * np.log(beta)
        + (hp.alpha - 1.0) * log_lam.sum(axis=1)
        - 0.5 * hp.kappa * np.sum((mu - hp.m) ** 2, axis=1)
        - beta * (hp.h + lam.sum(axis=1))
    )
    with np.errstate(divide="ignore"):
        log_q = np.log(q_full)
    # (rows, data, components)
    terms = (log_q + 0.5 * log_lam)[:, None, :] - 0.5 * lam[:, None, :] * (y[None, :, None] - mu[:, None, :]) ** 2
    loglik = logsumexp(terms, axis=2).sum(axis=1)
    out[ok] = const + prior + loglik
    return out


def log_posterior(
    theta: MixtureParams,
    data: Dataset,
    K: Optional[int] = None,
    hp: Optional[Hyperparameters] = None,
    constrained: bool = True,
    return_reason: bool = False,
) -> Union[float, Tuple[float, Optional[str]]]:
    """Unnormalized log p(theta | y); -inf off the support or when mu is unordered.

    The likelihood uses the Gaussian kernel exp(-lambda_k (y_i - mu_k)^2 / 2).
    """
    K = K or theta.K
    if theta.K != K:
        raise ValueError(f"Parameters have {theta.K} components, expected {K}")
    hp = hp or hyperparameters(data, K)
    reason = theta.violations()
    if reason is None and constrained and np.any(np.diff(theta.mu) < 0):
        reason = "means out of order"
    if reason is not None:
        logger.debug(f"log posterior is -inf: {reason}")
        value = -math.inf
    else:
        value = float(_log_post_rows(
            theta.mu[None, :], theta.lam[None, :], theta.full_weights()[None, :],
            np.array([theta.beta]), data.y, hp, constrained,
        )[0])
    return (value, reason) if return_reason else value


def truncated_log_posterior(
    theta: MixtureParams,
    data: Dataset,
    bias: BiasSet,
    hp: Optional[Hyperparameters] = None,
) -> float:
    """log p(theta | y) + log sum_ij psi_ij(theta); -inf off the union of supports"""
    base = log_posterior(theta, data, hp=hp)
    total = float(bias.psi_sum(theta.to_vector()[None, :], strict=False)[0])
    if total <= 0 or not math.isfinite(base):
        return -math.inf
    return base + math.log(total)


class MixturePosteriorTarget(TargetModel):
    """The posterior as a sampling target on (mu, log lambda, q, log beta)"""

    def __init__(self, data: Dataset, K: int, hp: Optional[Hyperparameters] = None, constrained: bool = True):
        self.data = data
        self.K = K
        self.hp = hp or hyperparameters(data, K)
        self.constrained = constrained
        super().__init__(log_density=self._log_density, dim=3 * K, domain=Domain(), name=f"mixture_K{K}")

    def _log_density(self, X: np.ndarray) -> np.ndarray:
        K = self.K
        mu, log_lam, q = X[:, :K], X[:, K:2 * K], X[:, 2 * K:3 * K - 1]
        log_beta = X[:, -1]
        q_full = np.column_stack([q, 1.0 - q.sum(axis=1)])
        with np.errstate(over="ignore"):
            lam, beta = np.exp(log_lam), np.exp(log_beta)
        out = _log_post_rows(mu, lam, q_full, beta, self.data.y, self.hp, self.constrained)
        # Jacobian of lambda = exp(.), beta = exp(.)
        return out + log_lam.sum(axis=1) + log_beta

    def initial_walkers(self, walkers: int, seed=None, spread: float = 0.05) -> np.ndarray:
        """Walkers scattered around a data-driven starting point"""
        rng = np.random.default_rng(seed)
        K = self.K
        groups = np.array_split(np.sort(self.data.y), K)
        mu = np.array([grp.mean() for grp in groups])
        lam = np.array([1.0 / max(grp.var(), 1e-6) for grp in groups])
        base = MixtureParams(mu=mu, lam=lam, q=np.full(K - 1, 1.0 / K), beta=1.0).to_vector()
        X = base + spread * rng.standard_normal((walkers, base.size)) * np.maximum(np.abs(base), 1.0)
        X[:, :K] = np.sort(X[:, :K], axis=1)
        X[:, 2 * K:3 * K - 1] = np.abs(X[:, 2 * K:3 * K - 1])
        over = X[:, 2 * K:3 * K - 1].sum(axis=1) >= 1
        X[over, 2 * K:3 * K - 1] *= 0.9 / X[over, 2 * K:3 * K - 1].sum(axis=1, keepdims=True)
        return X


# ============= Unboundedness =============
@dataclass(frozen=True)
class Bounded:
    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class UnboundedWitness:
    """A datum repeated often enough to make the posterior density unbounded"""

    datum: float
    frequency: int
    threshold: float

    def __bool__(self) -> bool:
        return False


def unboundedness_threshold(K: int, g: float = 0.2, alpha: float = 2.0) -> float:
    return 2.0 * g + 2.0 * (K - 1) * alpha


def unboundedness_check(
    data: Dataset, K: int, g: float = 0.2, alpha: float = 2.0
) -> Union[Bounded, UnboundedWitness]:
    """Flag the most frequent datum if its frequency exceeds 2g + 2(K-1)alpha"""
    threshold = unboundedness_threshold(K, g, alpha)
    table = data.frequency_table()
    top = table.iloc[0]
    if top["count"] > threshold:
        logger.warning(f"Datum {top['value']} appears {int(top['count'])} times (> {threshold}); posterior is unbounded")
        return UnboundedWitness(datum=float(top["value"]), frequency=int(top["count"]), threshold=threshold)
    return Bounded()
