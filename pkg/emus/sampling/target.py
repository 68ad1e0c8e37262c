"""Target densities and the potentials the experiments use.

A target is an unnormalized log density over points of shape (n, d). For
potential-based targets log pi = -beta * V.
"""
from dataclasses import dataclass, field
import math
from typing import Callable, Literal, Optional, Tuple

import numpy as np

from emus.errors import DomainError

LogDensity = Callable[[np.ndarray], np.ndarray]
DomainKind = Literal["box", "periodic", "half_line", "unconstrained"]


# ============= Potentials =============
@dataclass(frozen=True)
class Linear:
    """V(x) = slope * x_0 (exponential target on the half-line)"""

    slope: float = 1.0

    def value(self, X: np.ndarray) -> np.ndarray:
        return self.slope * X[:, 0]

    def gradient(self, X: np.ndarray) -> np.ndarray:
        g = np.zeros_like(X)
        g[:, 0] = self.slope
        return g


@dataclass(frozen=True)
class Quadratic:
    """V(x) = stiffness/2 * |x - center|^2"""

    stiffness: float = 1.0
    center: float = 0.0

    def value(self, X: np.ndarray) -> np.ndarray:
        return 0.5 * self.stiffness * np.sum((X - self.center) ** 2, axis=1)

    def gradient(self, X: np.ndarray) -> np.ndarray:
        return self.stiffness * (X - self.center)


@dataclass(frozen=True)
class Cosine:
    """V(x) = sum_a cos(2 pi freq x_a) + tilt * sin(2 pi x_a), period one.

    With freq=2 the potential has two wells per axis; a positive tilt makes
    the well at 1/4 shallower than the one at 3/4.
    """

    freq: int = 2
    tilt: float = 0.0

    def value(self, X: np.ndarray) -> np.ndarray:
        w = 2.0 * math.pi
        return np.sum(np.cos(w * self.freq * X) + self.tilt * np.sin(w * X), axis=1)

    def gradient(self, X: np.ndarray) -> np.ndarray:
        w = 2.0 * math.pi
        return -w * self.freq * np.sin(w * self.freq * X) + self.tilt * w * np.cos(w * X)


@dataclass(frozen=True)
class DoubleWell:
    """V(x) = barrier * (x_0^2 - 1)^2 + 1/2 sum_{a>0} x_a^2"""

    barrier: float = 1.0

    def value(self, X: np.ndarray) -> np.ndarray:
        v = self.barrier * (X[:, 0] ** 2 - 1.0) ** 2
        if X.shape[1] > 1:
            v = v + 0.5 * np.sum(X[:, 1:] ** 2, axis=1)
        return v

    def gradient(self, X: np.ndarray) -> np.ndarray:
        g = X.copy()
        g[:, 0] = 4.0 * self.barrier * X[:, 0] * (X[:, 0] ** 2 - 1.0)
        return g


@dataclass(frozen=True)
class Flat:
    def value(self, X: np.ndarray) -> np.ndarray:
        return np.zeros(X.shape[0])

    def gradient(self, X: np.ndarray) -> np.ndarray:
        return np.zeros_like(X)


POTENTIALS = {
    "linear": Linear,
    "quadratic": Quadratic,
    "cosine": Cosine,
    "double_well": DoubleWell,
    "flat": Flat,
}


def make_potential(name: str, **params):
    try:
        return POTENTIALS[name](**params)
    except KeyError:
        raise ValueError(f"Unknown potential '{name}'. Choose from {sorted(POTENTIALS)}")


# ============= Domain and target =============
@dataclass(frozen=True)
class Domain:
    kind: DomainKind = "unconstrained"
    lo: float = 0.0
    hi: float = 1.0

    @property
    def period(self) -> Optional[float]:
        return self.hi - self.lo if self.kind == "periodic" else None

    def contains(self, X: np.ndarray) -> np.ndarray:
        finite = np.all(np.isfinite(X), axis=1)
        if self.kind == "box":
            return finite & np.all((X >= self.lo) & (X <= self.hi), axis=1)
        if self.kind == "half_line":
            return finite & np.all(X >= self.lo, axis=1)
        return finite

    def wrap(self, X: np.ndarray) -> np.ndarray:
        if self.kind != "periodic":
            return X
        return self.lo + np.mod(X - self.lo, self.hi - self.lo)


@dataclass
class TargetModel:
    """Unnormalized target pi with optional gradient of log pi"""

    log_density: LogDensity
    dim: int
    grad_log_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    domain: Domain = field(default_factory=Domain)
    name: str = "custom"

    def logp(self, X: np.ndarray) -> np.ndarray:
        """log pi at X; -inf outside the domain"""
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        out = np.full(X.shape[0], -np.inf)
        inside = self.domain.contains(X)
        if inside.any():
            out[inside] = self.log_density(X[inside])
        return out

    def grad_logp(self, X: np.ndarray) -> np.ndarray:
        if self.grad_log_density is None:
            raise ValueError(f"Target '{self.name}' has no gradient of its log density")
        return self.grad_log_density(np.asarray(X, dtype=float).reshape(-1, self.dim))

    def check_point(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        if not self.domain.contains(x)[0]:
            raise DomainError(f"Point {x[0]} is outside the {self.domain.kind} domain", point=x[0])

    def scaled(self, log_constant: float) -> "TargetModel":
        """Same target with the density multiplied by exp(log_constant)"""
        base = self.log_density
        return TargetModel(
            log_density=lambda X: base(X) + log_constant,
            dim=self.dim,
            grad_log_density=self.grad_log_density,
            domain=self.domain,
            name=self.name,
        )


def target_from_potential(
    potential,
    beta: float = 1.0,
    dim: int = 1,
    domain: Optional[Domain] = None,
    name: Optional[str] = None,
) -> TargetModel:
    """pi proportional to exp(-beta V)"""
    return TargetModel(
        log_density=lambda X: -beta * potential.value(X),
        grad_log_density=lambda X: -beta * potential.gradient(X),
        dim=dim,
        domain=domain or Domain(),
        name=name or type(potential).__name__.lower(),
    )


def quadrature_expectation(
    potential,
    g: Callable[[np.ndarray], np.ndarray],
    beta: float = 1.0,
    bounds: Tuple[float, float] = (0.0, 1.0),
    n: int = 200_001,
) -> float:
    """pi[g] for a 1-D potential target by composite Simpson quadrature"""
    from scipy.integrate import simpson

    x = np.linspace(bounds[0], bounds[1], n)
    logw = -beta * potential.value(x[:, None])
    w = np.exp(logw - logw.max())
    gx = np.asarray(g(x[:, None]), dtype=float)
    return float(simpson(w * gx, x=x) / simpson(w, x=x))
