"""Bias function families.

Every family is an immutable pydantic model. Evaluation is vectorized over
points ``X`` of shape ``(n, d)`` and goes through ``local``, which returns the
few nonzero entries per point as ``(idx, val)`` arrays of shape ``(n, m)``.
Dense ``(n, L)`` matrices are only built on request.

Interval convention: stratum supports are half-open on the upper side, so a
point on a cell boundary belongs to the upper cell.
"""
import itertools
import json
import logging
import math
from abc import ABC, abstractmethod
from typing import Annotated, Any, Callable, Dict, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, field_validator, model_validator

from emus.bias.cv import get_cv
from emus.errors import DomainError

logger = logging.getLogger(__name__)


def as_points(X: Any, dim: Optional[int] = None) -> np.ndarray:
    """Coerce ``X`` to a float array of shape (n, d)"""
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1) if dim == 1 else X.reshape(1, -1)
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"Expected points of dimension {dim}, got shape {X.shape}")
    return X


def _tensor_local(axis_idx, axis_w, shape) -> Tuple[np.ndarray, np.ndarray]:
    """Combine per-axis (node, weight) pairs into row-major flat indices.

    ``axis_idx[a]`` and ``axis_w[a]`` have shape (n, 2). Returns arrays of
    shape (n, 2**d).
    """
    n = axis_idx[0].shape[0]
    strides = np.cumprod((1,) + tuple(shape[::-1]))[:-1][::-1]
    combos = list(itertools.product((0, 1), repeat=len(shape)))
    idx = np.zeros((n, len(combos)), dtype=np.int64)
    val = np.ones((n, len(combos)))
    for c, choice in enumerate(combos):
        for a, side in enumerate(choice):
            idx[:, c] += axis_idx[a][:, side] * strides[a]
            val[:, c] *= axis_w[a][:, side]
    return idx, val


class BiasSet(BaseModel, ABC):
    """A family of L nonnegative bias functions with box-shaped supports"""

    model_config = ConfigDict(frozen=True)

    # ----- shape metadata -----
    @property
    @abstractmethod
    def n_strata(self) -> int:
        ...

    @property
    @abstractmethod
    def input_dim(self) -> Optional[int]:
        """Dimension of the states the family is evaluated at (None: any)"""

    @property
    @abstractmethod
    def partition_of_unity(self) -> bool:
        ...

    @property
    def piecewise_constant(self) -> bool:
        return False

    @property
    def truncated(self) -> bool:
        """True when the union of supports does not cover the target's domain"""
        return False

    @property
    def periods(self) -> np.ndarray:
        """Per-axis period of the support coordinates, NaN where not periodic"""
        lo, _ = self.support_boxes()
        return np.full(lo.shape[1], np.nan)

    @property
    def boxes_in_state_space(self) -> bool:
        """Whether support_boxes are expressed in state coordinates"""
        return True

    # ----- evaluation -----
    @abstractmethod
    def in_domain(self, X: np.ndarray) -> np.ndarray:
        """Boolean mask of points in the declared domain"""

    @abstractmethod
    def local(self, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nonzero entries (idx, val) of psi at domain points X"""

    @abstractmethod
    def support_boxes(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-stratum support boxes (lo, hi), each of shape (L, l)"""

    def _check_domain(self, X: np.ndarray, strict: bool) -> np.ndarray:
        mask = self.in_domain(X)
        if strict and not mask.all():
            bad = int(np.flatnonzero(~mask)[0])
            raise DomainError(f"Point {X[bad]} is outside the domain of {self.kind}", point=X[bad])
        return mask

    def local_checked(self, X: Any, strict: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """``local`` with domain validation; out-of-domain rows get zero weight"""
        X = as_points(X, self.input_dim)
        mask = self._check_domain(X, strict)
        if mask.all():
            return self.local(X)
        idx, val = self.local(np.where(mask[:, None], X, self._safe_point(X.shape[1])))
        val[~mask] = 0.0
        return idx, val

    def _safe_point(self, dim: int) -> np.ndarray:
        lo, hi = self.support_boxes()
        return np.where(np.isfinite(hi[0]), 0.5 * (lo[0] + hi[0]), lo[0])

    def evaluate_many(self, X: Any, strict: bool = True) -> np.ndarray:
        """Dense (n, L) matrix of psi values"""
        idx, val = self.local_checked(X, strict)
        out = np.zeros((idx.shape[0], self.n_strata))
        rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
        np.add.at(out, (rows, idx.ravel()), val.ravel())
        return out

    def component(self, X: Any, i: int, strict: bool = True) -> np.ndarray:
        """psi_i at every point of X"""
        idx, val = self.local_checked(X, strict)
        return np.where(idx == i, val, 0.0).sum(axis=1)

    def psi_sum(self, X: Any, strict: bool = True) -> np.ndarray:
        _, val = self.local_checked(X, strict)
        return val.sum(axis=1)

    def grad_log_component(self, X: np.ndarray, i: int) -> Optional[np.ndarray]:
        """Gradient of log psi_i in state coordinates, or None when constant/unknown"""
        return None

    # ----- serialization -----
    def to_descriptor(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


class IndicatorGrid(BiasSet):
    """Uniform grid of half-overlapping box indicators.

    Periodic grids live on [lo, hi)^d with K boxes per axis centred at
    lo + h*i (h=(hi-lo)/K), each of half-width h. Non-periodic grids use K+1
    boxes per axis on [lo, hi], truncated at the edges. Every point lies in
    exactly 2^d boxes and each box has weight 1/2^d, so the family is a
    partition of unity.
    """

    kind: Literal["indicator_grid"] = "indicator_grid"
    dim: int = Field(ge=1)
    K: int = Field(ge=1)
    periodic: bool = True
    lo: float = 0.0
    hi: float = 1.0

    @model_validator(mode="after")
    def _check_bounds(self):
        if not self.hi > self.lo:
            raise ValueError("hi must exceed lo")
        return self

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / self.K

    @property
    def nodes_per_axis(self) -> int:
        return self.K if self.periodic else self.K + 1

    @property
    def grid_shape(self) -> Tuple[int, ...]:
        return (self.nodes_per_axis,) * self.dim

    @property
    def n_strata(self) -> int:
        return self.nodes_per_axis ** self.dim

    @property
    def input_dim(self) -> int:
        return self.dim

    @property
    def partition_of_unity(self) -> bool:
        return True

    @property
    def piecewise_constant(self) -> bool:
        return True

    @property
    def periods(self) -> np.ndarray:
        return np.full(self.dim, self.hi - self.lo if self.periodic else np.nan)

    def centers(self) -> np.ndarray:
        """Box centres, shape (L, d), in row-major stratum order"""
        axis = self.lo + self.h * np.arange(self.nodes_per_axis)
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def in_domain(self, X: np.ndarray) -> np.ndarray:
        if self.periodic:
            return np.isfinite(X).all(axis=1)
        return ((X >= self.lo) & (X <= self.hi)).all(axis=1)

    def local(self, X: np.ndarray):
        u = (X - self.lo) / self.h
        cell = np.floor(u).astype(np.int64)
        if self.periodic:
            cell = np.mod(cell, self.K)
            upper = np.mod(cell + 1, self.K)
        else:
            cell = np.clip(cell, 0, self.K - 1)
            upper = cell + 1
        half = np.full((X.shape[0], 2), 0.5)
        axis_idx = [np.stack([cell[:, a], upper[:, a]], axis=1) for a in range(self.dim)]
        idx, val = _tensor_local(axis_idx, [half] * self.dim, self.grid_shape)
        return idx, val

    def support_boxes(self):
        c = self.centers()
        lo, hi = c - self.h, c + self.h
        if not self.periodic:
            lo, hi = np.maximum(lo, self.lo), np.minimum(hi, self.hi)
        return lo, hi


class TailFamily(BiasSet):
    """The K+2 half-line family used for tail probabilities p_M.

    With h=M/K: psi_0 = 1/2 on [0,h], psi_i = 1/2 on [(i-1)h,(i+1)h] for
    1 <= i <= K-1, psi_K = 1/2 on [M-h, inf), psi_{K+1} = 1/2 on [M, inf).
    """

    kind: Literal["tail"] = "tail"
    M: float = Field(gt=0)
    K: int = Field(ge=1)

    @property
    def h(self) -> float:
        return self.M / self.K

    @property
    def n_strata(self) -> int:
        return self.K + 2

    @property
    def input_dim(self) -> int:
        return 1

    @property
    def partition_of_unity(self) -> bool:
        return True

    @property
    def piecewise_constant(self) -> bool:
        return True

    def in_domain(self, X: np.ndarray) -> np.ndarray:
        return (X[:, 0] >= 0) & ~np.isnan(X[:, 0])

    def local(self, X: np.ndarray):
        cell = np.minimum(np.floor(X[:, 0] / self.h), self.K).astype(np.int64)
        idx = np.stack([cell, cell + 1], axis=1)
        return idx, np.full(idx.shape, 0.5)

    def support_boxes(self):
        L, h = self.n_strata, self.h
        i = np.arange(L, dtype=float)
        lo = np.maximum((i - 1) * h, 0.0)
        hi = (i + 1) * h
        hi[0] = h
        lo[self.K], hi[self.K] = self.M - h, np.inf
        lo[self.K + 1], hi[self.K + 1] = self.M, np.inf
        return lo[:, None], hi[:, None]


class BilinearGrid(BiasSet):
    """Tensor grid of pyramid (hat) functions.

    Nodes sit at lo + h*k, k=0..n-1, h=(hi-lo)/(n-1), and
    psi_k(x) = prod_a max(0, 1-|x_a-c_a|/h). The family sums to one on
    [lo, hi]^l only; outside that region the edge pyramids are truncated and
    the sampled distribution is the correspondingly truncated target.
    """

    kind: Literal["bilinear_grid"] = "bilinear_grid"
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    counts: Tuple[int, ...]

    @field_validator("counts")
    @classmethod
    def _counts_ok(cls, v):
        if any(c < 2 for c in v):
            raise ValueError("each axis needs at least two nodes")
        return v

    @model_validator(mode="after")
    def _check_axes(self):
        if not (len(self.lo) == len(self.hi) == len(self.counts)):
            raise ValueError("lo, hi and counts must have the same length")
        if any(b <= a for a, b in zip(self.lo, self.hi)):
            raise ValueError("hi must exceed lo on every axis")
        return self

    @classmethod
    def square(cls, lo: float, hi: float, n: int, dim: int = 2) -> "BilinearGrid":
        return cls(lo=(lo,) * dim, hi=(hi,) * dim, counts=(n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def h(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / (np.array(self.counts) - 1)

    @property
    def grid_shape(self) -> Tuple[int, ...]:
        return tuple(self.counts)

    @property
    def n_strata(self) -> int:
        return int(np.prod(self.counts))

    @property
    def input_dim(self) -> int:
        return self.dim

    @property
    def partition_of_unity(self) -> bool:
        return False

    @property
    def truncated(self) -> bool:
        return True

    @property
    def unity_region(self) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
        return self.lo, self.hi

    def centers(self) -> np.ndarray:
        axes = [a + hh * np.arange(c) for a, hh, c in zip(self.lo, self.h, self.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def in_domain(self, X: np.ndarray) -> np.ndarray:
        lo = np.array(self.lo) - self.h
        hi = np.array(self.hi) + self.h
        return ((X > lo) & (X < hi)).all(axis=1)

    def local(self, X: np.ndarray):
        u = (X - np.array(self.lo)) / self.h
        j = np.floor(u).astype(np.int64)
        t = u - j
        axis_idx, axis_w = [], []
        for a, n in enumerate(self.counts):
            nodes = np.stack([j[:, a], j[:, a] + 1], axis=1)
            w = np.stack([1.0 - t[:, a], t[:, a]], axis=1)
            valid = (nodes >= 0) & (nodes < n)
            axis_idx.append(np.clip(nodes, 0, n - 1))
            axis_w.append(np.where(valid, w, 0.0))
        return _tensor_local(axis_idx, axis_w, self.grid_shape)

    def support_boxes(self):
        c = self.centers()
        return c - self.h, c + self.h

    def grad_log_component(self, X: np.ndarray, i: int) -> np.ndarray:
        c = self.centers()[i]
        d = (X - c) / self.h
        inside = np.abs(d) < 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            g = -np.sign(d) / (self.h * (1.0 - np.abs(d)))
        return np.where(inside, g, np.nan)


class ComposedBias(BiasSet):
    """psi_i(x) = phi_i(cv(x)) for an inner family phi over cv space"""

    kind: Literal["composed"] = "composed"
    inner: "AnyBias"
    cv: str = "identity"
    cv_params: Dict[str, Any] = Field(default_factory=dict)

    def collective(self, X: Any) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return get_cv(self.cv)(X, **self.cv_params)

    @property
    def n_strata(self) -> int:
        return self.inner.n_strata

    @property
    def input_dim(self) -> Optional[int]:
        return self.inner.input_dim if self.cv == "identity" else None

    @property
    def partition_of_unity(self) -> bool:
        return self.inner.partition_of_unity

    @property
    def piecewise_constant(self) -> bool:
        return self.inner.piecewise_constant

    @property
    def truncated(self) -> bool:
        return self.inner.truncated

    @property
    def periods(self) -> np.ndarray:
        return self.inner.periods

    @property
    def boxes_in_state_space(self) -> bool:
        return self.cv == "identity"

    def in_domain(self, X: np.ndarray) -> np.ndarray:
        return self.inner.in_domain(self.collective(X))

    def local(self, X: np.ndarray):
        return self.inner.local(self.collective(X))

    def local_checked(self, X: Any, strict: bool = True):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return self.inner.local_checked(self.collective(X), strict)

    def support_boxes(self):
        return self.inner.support_boxes()

    def grad_log_component(self, X: np.ndarray, i: int) -> Optional[np.ndarray]:
        if self.cv != "identity":
            return None
        return self.inner.grad_log_component(X, i)


AnyBias = Annotated[
    Union[IndicatorGrid, TailFamily, BilinearGrid, ComposedBias],
    Field(discriminator="kind"),
]
ComposedBias.model_rebuild()

_descriptor_adapter = TypeAdapter(AnyBias)


# ============= Operations =============
def evaluate_all(bias: BiasSet, x: Any) -> np.ndarray:
    """(psi_1(x), ..., psi_L(x)) at a single point"""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return bias.evaluate_many(x.reshape(1, -1))[0]


def make_tail_family(M: float, V: Union[Callable, Any], n_grid: int = 10_001) -> TailFamily:
    """Tail family with K = M * max_{0<=x<=M} ceil(|V'(x)|).

    ``V`` is either a potential with a ``gradient`` method or a callable
    returning V' on an array of points.
    """
    if not M > 0:
        raise ValueError("M must be positive")
    x = np.linspace(0.0, M, n_grid)
    if hasattr(V, "gradient"):
        dV = np.asarray(V.gradient(x[:, None]), dtype=float).reshape(-1)
    else:
        dV = np.asarray(V(x), dtype=float).reshape(-1)
    if not np.all(np.isfinite(dV)):
        bad = x[~np.isfinite(dV)][0]
        raise DomainError(f"V' is not finite at x={bad} on [0, {M}]", point=[bad])
    slope = np.max(np.ceil(np.abs(dV)))
    K = max(1, int(math.ceil(M * slope - 1e-9)))
    logger.info(f"Tail family for M={M}: K={K}, h={M / K:.6g}")
    return TailFamily(M=M, K=K)


def compose_with_cv(inner: BiasSet, cv: str = "identity", **cv_params) -> ComposedBias:
    """Bias family psi_i = phi_i o cv for a registered collective variable"""
    get_cv(cv)  # fail early on unknown names
    return ComposedBias(inner=inner, cv=cv, cv_params=cv_params)


def bias_from_descriptor(descriptor: Union[str, Dict[str, Any]]) -> BiasSet:
    """Build a bias family from its JSON descriptor (dict or JSON text)"""
    if isinstance(descriptor, str):
        try:
            descriptor = json.loads(descriptor)
        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid bias descriptor JSON: {e}")
    return _descriptor_adapter.validate_python(descriptor)
