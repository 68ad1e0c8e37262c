"""The EMUS estimator: overlap matrix, weight vector and pi_US[g].

Notation follows the usual umbrella-sampling setup: stratum i is sampled by a
trajectory X^i_t, psi*_j = psi_j / sum_k psi_k, and the overlap matrix has
entries Fbar_ij = mean_t psi*_j(X^i_t).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy import linalg
from scipy.sparse import csgraph, csr_matrix

from emus.bias.families import BiasSet
from emus.bias.support import ReducibleWitness, transition_witness
from emus.config import settings
from emus.errors import ConvergenceError, EstimationError, ReducibleError
from emus.sampling.chains import Trajectory

logger = logging.getLogger(__name__)

Observable = Callable[[np.ndarray], np.ndarray]


# ============= Types =============
@dataclass
class StratumStats:
    """Trajectory averages of one stratum plus the series behind them.

    ``psi_series`` holds psi*_j(X_t) for the columns in ``active`` only (the
    strata whose psi is nonzero somewhere along the trajectory).
    """

    i: int
    N: int
    Fbar_row: np.ndarray
    gbar_star: float
    onebar_star: float
    active: np.ndarray
    psi_series: np.ndarray
    g_series: np.ndarray
    one_series: np.ndarray
    psi_total: np.ndarray
    cv_values: Optional[np.ndarray] = None
    n_walkers: int = 1
    acceptance_rate: float = 1.0

    @property
    def gbar(self) -> float:
        """Plain average of g; equals gbar_star under a partition of unity"""
        return float(np.mean(self.g_series * self.psi_total))


@dataclass
class OverlapMatrix:
    F: np.ndarray
    partition_of_unity: bool = True
    strata: np.ndarray = None

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=float)
        if self.F.ndim != 2 or self.F.shape[0] != self.F.shape[1]:
            raise ValueError(f"Overlap matrix must be square, got shape {self.F.shape}")
        if self.strata is None:
            self.strata = np.arange(self.F.shape[0])

    @property
    def L(self) -> int:
        return self.F.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.F.sum(axis=1)

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(self.F, index=self.strata, columns=self.strata)


@dataclass
class WeightVector:
    z: np.ndarray
    strata: np.ndarray = None
    method: str = "gth"
    residual: float = 0.0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        if self.strata is None:
            self.strata = np.arange(self.z.size)

    @property
    def L(self) -> int:
        return self.z.size


class EstimateReport(BaseModel):
    """Machine-readable summary of one EMUS estimate"""

    estimate: float
    z: List[float]
    strata: List[int]
    dropped: List[int]
    n_samples: List[int]
    method: str
    stationary_residual: float
    smallest_singular_value: float
    condition_number: float
    z_min: float
    z_max: float


# ============= Accumulation =============
def _local_star(bias: BiasSet, X: np.ndarray, keep: Optional[np.ndarray]):
    m_rows = max(1, settings.chunk_size // 16)
    idx_parts, val_parts = [], []
    for start in range(0, X.shape[0], m_rows):
        idx, val = bias.local_checked(X[start:start + m_rows], strict=True)
        if keep is not None:
            val = np.where(keep[idx], val, 0.0)
        idx_parts.append(idx)
        val_parts.append(val)
    return np.concatenate(idx_parts), np.concatenate(val_parts)


def accumulate(
    trajectory: Trajectory,
    bias: BiasSet,
    g: Optional[Observable] = None,
    cv: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    keep: Optional[np.ndarray] = None,
) -> StratumStats:
    """Trajectory averages of psi*_j, g* and 1* for one stratum.

    Args:
        trajectory: samples of pi_i (its ``stratum`` field names i)
        bias: the bias family
        g: observable evaluated on states, shape (n,); constant one when None
        cv: optional collective variable whose values are cached per sample
        keep: optional boolean mask of strata that make up the family; psi of
            the other strata is treated as zero

    Raises:
        EstimationError: if sum_k psi_k vanishes at a state
    """
    X = trajectory.states
    N = X.shape[0]
    if N == 0:
        raise EstimationError(f"stratum {trajectory.stratum}: empty trajectory")
    L = bias.n_strata
    idx, val = _local_star(bias, X, keep)
    total = val.sum(axis=1)
    zero = np.flatnonzero(total <= 0)
    if zero.size:
        raise EstimationError(
            f"stratum {trajectory.stratum}: sum of bias functions vanishes at state {X[zero[0]]} (row {zero[0]})"
        )
    star = val / total[:, None]
    active = np.unique(idx[star > 0])
    pos = np.searchsorted(active, idx)
    series = np.zeros((N, active.size), order="F")
    rows = np.repeat(np.arange(N), idx.shape[1])
    np.add.at(series, (rows, pos.ravel()), star.ravel())

    gx = np.ones(N) if g is None else np.asarray(g(X), dtype=float).reshape(N)
    g_series = gx / total
    one_series = 1.0 / total

    Fbar_row = np.zeros(L)
    Fbar_row[active] = series.mean(axis=0)
    return StratumStats(
        i=int(trajectory.stratum),
        N=N,
        Fbar_row=Fbar_row,
        gbar_star=float(np.mean(g_series)),
        onebar_star=float(np.mean(one_series)),
        active=active,
        psi_series=series,
        g_series=g_series,
        one_series=one_series,
        psi_total=total,
        cv_values=None if cv is None else np.asarray(cv(X), dtype=float),
        n_walkers=trajectory.n_walkers,
        acceptance_rate=trajectory.acceptance_rate,
    )


def accumulate_all(
    trajectories: Sequence[Trajectory],
    bias: BiasSet,
    g: Optional[Observable] = None,
    cv: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    keep: Optional[np.ndarray] = None,
    max_workers: Optional[int] = None,
) -> List[StratumStats]:
    """accumulate() over many strata; results come back in input order"""
    workers = max_workers or settings.max_workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda t: accumulate(t, bias, g, cv, keep), trajectories))


def with_observable(stats: StratumStats, g: Observable, X: np.ndarray) -> StratumStats:
    """Copy of ``stats`` whose g-series is recomputed for a new observable"""
    gx = np.asarray(g(X), dtype=float).reshape(stats.N)
    g_series = gx / stats.psi_total
    out = StratumStats(**{**stats.__dict__})
    out.g_series = g_series
    out.gbar_star = float(np.mean(g_series))
    return out


def build_overlap(stats: Sequence[StratumStats], L: int, partition_of_unity: bool = True) -> OverlapMatrix:
    """Stack the Fbar rows of ``stats`` (stratum i in row i)"""
    F = np.zeros((L, L))
    for s in stats:
        F[s.i] = s.Fbar_row
    return OverlapMatrix(F=F, partition_of_unity=partition_of_unity)


# ============= Stationary vector =============
def _gth(F: np.ndarray) -> np.ndarray:
    A = np.array(F, dtype=float)
    n = A.shape[0]
    x = np.zeros(n)
    for k in range(n - 1):
        scale = np.sum(A[k, k + 1:n])
        if scale <= 0:
            raise EstimationError(f"GTH reduction broke down at row {k}")
        A[k + 1:n, k] /= scale
        A[k + 1:n, k + 1:n] += np.outer(A[k + 1:n, k], A[k, k + 1:n])
    x[n - 1] = 1.0
    for k in range(n - 2, -1, -1):
        x[k] = np.dot(x[k + 1:n], A[k + 1:n, k])
    return x / np.sum(x)


def _qr_null(F: np.ndarray) -> np.ndarray:
    A = np.eye(F.shape[0]) - F
    Q, _, _ = linalg.qr(A, pivoting=True)
    z = Q[:, -1]
    return z / np.sum(z)


def stationary_vector(F: Union[OverlapMatrix, np.ndarray], method: Optional[str] = None) -> WeightVector:
    """The z with z^T F = z^T and sum(z) = 1.

    ``method="gth"`` (default) uses the Grassmann-Taksar-Heyman reduction,
    which keeps relative accuracy in very small entries; ``method="qr"``
    takes the left null vector of I - F from a pivoted QR factorization.

    Raises:
        EstimationError: entries below -negative_tol
        ReducibleError: F is reducible (carries the witness)
    """
    om = F if isinstance(F, OverlapMatrix) else OverlapMatrix(F=F)
    method = method or settings.stationary_method
    M = om.F
    if np.any(M < -settings.negative_tol):
        raise EstimationError(f"Overlap matrix has negative entries (min {M.min():.3e})")
    M = np.where(M < 0, 0.0, M)
    witness = transition_witness(M)
    if isinstance(witness, ReducibleWitness):
        raise ReducibleError("Overlap matrix is reducible", witness)
    if om.L == 1:
        return WeightVector(z=np.ones(1), strata=om.strata, method=method)

    if method == "gth":
        z = _gth(M)
    elif method == "qr":
        z = _qr_null(M)
    else:
        raise ValueError(f"Unknown stationary method '{method}'")
    if np.any(z < -settings.negative_tol):
        logger.warning(f"Stationary vector has negative entries down to {z.min():.3e}")
    z = np.clip(z, 0.0, None)
    z /= z.sum()
    residual = float(np.max(np.abs(z @ M - z)))
    if residual > 1e-10 * om.L:
        logger.warning(f"Stationary residual {residual:.3e} exceeds {1e-10 * om.L:.1e}")
    return WeightVector(z=z, strata=om.strata, method=method, residual=residual)


def restrict_to_component(F: Union[OverlapMatrix, np.ndarray], anchor: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Strongly connected component of the index chain containing ``anchor``.

    Returns (kept, dropped) stratum indices. Strata without samples have zero
    rows and always end up in ``dropped``.
    """
    M = F.F if isinstance(F, OverlapMatrix) else np.asarray(F)
    _, labels = csgraph.connected_components(csr_matrix((M > 0).astype(float)), directed=True, connection="strong")
    kept = np.flatnonzero(labels == labels[anchor])
    dropped = np.flatnonzero(labels != labels[anchor])
    if dropped.size:
        logger.info(f"Restricting to {kept.size} strata around anchor {anchor}; dropping {dropped.size}")
    return kept, dropped


# ============= Estimates =============
def emus_estimate(stats: Sequence[StratumStats], z: Union[WeightVector, np.ndarray]) -> float:
    """pi_US[g] = sum z_i gbar*_i / sum z_i onebar*_i"""
    zz = z.z if isinstance(z, WeightVector) else np.asarray(z, dtype=float)
    if len(stats) != zz.size:
        raise EstimationError(f"{len(stats)} strata but weight vector of length {zz.size}")
    num = sum(zi * s.gbar_star for zi, s in zip(zz, stats))
    den = sum(zi * s.onebar_star for zi, s in zip(zz, stats))
    if not den > 0:
        raise EstimationError(f"Estimator denominator is not positive ({den})")
    return float(num / den)


def _vardi_matrix(stats: Sequence[StratumStats], u: np.ndarray) -> np.ndarray:
    """Row-stochastic form of Gbar(u).

    Gbar_ij(u) = (N_i/u_i) mean_i[psi*_j / sum_k psi*_k N_k/u_k] is similar
    to G_ij = mean_i[psi*_j c_j / sum_k psi*_k c_k] with c = N/u through
    diag(c); G has unit row sums, so its stationary vector p gives the left
    eigenvector of Gbar as z_j ∝ p_j / c_j.
    """
    L = len(stats)
    N = np.array([s.N for s in stats], dtype=float)
    c = N / u
    c = c / c.max()
    G = np.zeros((L, L))
    for r, s in enumerate(stats):
        weighted = s.psi_series * c[s.active]
        G[r, s.active] = np.mean(weighted / weighted.sum(axis=1)[:, None], axis=0)
    return G


def iterative_emus(
    stats: Sequence[Union[StratumStats, Trajectory]],
    bias: Optional[BiasSet] = None,
    z0: Optional[np.ndarray] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> Tuple[np.ndarray, int]:
    """Fixed-point iteration for the self-consistent (Vardi) weight vector.

    Each step builds Gbar_ij(z^m) and solves z^{m+1} = z^{m+1} Gbar(z^m)
    through the stationary vector of its row-stochastic form. Stops when
    max_i |z_i^{m+1} - z_i^m| / z_i^m <= tol.

    Args:
        stats: StratumStats for strata 0..L-1, or trajectories (with ``bias``)
        z0: positive start vector; defaults to N_i / N, whose first iterate
            is the plain EMUS weight vector

    Returns:
        (normalized z_V, number of iterations)
    """
    tol = tol or settings.iter_tol
    max_iter = max_iter or settings.iter_max
    if stats and isinstance(stats[0], Trajectory):
        if bias is None:
            raise ValueError("`bias` is required when passing trajectories")
        stats = accumulate_all(stats, bias)
    stats = sorted(stats, key=lambda s: s.i)
    N = np.array([s.N for s in stats], dtype=float)
    z = N / N.sum() if z0 is None else np.asarray(z0, dtype=float)
    if z.size != len(stats) or np.any(z <= 0):
        raise ValueError("`z0` must be a positive vector with one entry per stratum")
    z = z / z.sum()

    for it in range(1, max_iter + 1):
        p = stationary_vector(_vardi_matrix(stats, z)).z
        new = p * z / N
        new /= new.sum()
        change = np.max(np.abs(new - z) / z)
        z = new
        if change <= tol:
            logger.info(f"Iterative EMUS converged in {it} iterations (change {change:.2e})")
            return z, it
        if np.any(z <= 0):
            raise ConvergenceError("weight vector lost positivity", z, it)
    raise ConvergenceError(f"Iterative EMUS did not converge in {max_iter} iterations", z, max_iter)


def condition_diagnostics(F: np.ndarray) -> Tuple[float, float]:
    """Smallest nonzero singular value of I - F and the matching condition number"""
    s = linalg.svdvals(np.eye(F.shape[0]) - F)
    if s.size < 2:
        return float("inf"), 1.0
    return float(s[-2]), float(s[0] / s[-2]) if s[-2] > 0 else float("inf")


def estimate_report(
    stats: Sequence[StratumStats],
    F: OverlapMatrix,
    z: WeightVector,
    dropped: Sequence[int] = (),
) -> EstimateReport:
    smin, cond = condition_diagnostics(F.F)
    return EstimateReport(
        estimate=emus_estimate(stats, z),
        z=z.z.tolist(),
        strata=[int(i) for i in z.strata],
        dropped=[int(i) for i in dropped],
        n_samples=[s.N for s in stats],
        method=z.method,
        stationary_residual=z.residual,
        smallest_singular_value=smin,
        condition_number=cond,
        z_min=float(z.z.min()),
        z_max=float(z.z.max()),
    )


@dataclass
class EmusResult:
    """Everything one EMUS pass produces on a (possibly restricted) family"""

    stats: List[StratumStats]
    overlap: OverlapMatrix
    weights: WeightVector
    estimate: float
    kept: np.ndarray
    dropped: np.ndarray
    report: EstimateReport = None


def run_emus(
    trajectories: Sequence[Trajectory],
    bias: BiasSet,
    g: Optional[Observable] = None,
    cv: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    anchor: int = 0,
    method: Optional[str] = None,
) -> EmusResult:
    """accumulate -> overlap -> restriction -> stationary vector -> estimate.

    Strata missing from ``trajectories`` or outside the strongly connected
    component of ``anchor`` are dropped; the remaining strata are
    re-accumulated with the dropped bias functions removed and renumbered
    0..len(kept)-1 in the returned stats (``overlap.strata`` keeps the
    original ids).
    """
    L = bias.n_strata
    stats = accumulate_all(trajectories, bias, g, cv)
    F = build_overlap(stats, L, bias.partition_of_unity)
    kept, dropped = restrict_to_component(F, anchor)
    by_id = {t.stratum: t for t in trajectories}
    if dropped.size:
        keep = np.zeros(L, dtype=bool)
        keep[kept] = True
        stats = accumulate_all([by_id[i] for i in kept], bias, g, cv, keep=keep)
    else:
        stats = sorted(stats, key=lambda s: s.i)
    stats = _renumber(stats, kept)
    F = OverlapMatrix(F=np.stack([s.Fbar_row for s in stats]), partition_of_unity=bias.partition_of_unity, strata=kept)
    z = stationary_vector(F, method)
    z.strata = kept
    report = estimate_report(stats, F, z, dropped)
    logger.info(f"EMUS estimate {report.estimate:.6g} over {kept.size} strata")
    return EmusResult(stats, F, z, report.estimate, kept, dropped, report)


def _renumber(stats: Sequence[StratumStats], kept: np.ndarray) -> List[StratumStats]:
    """Re-index stats onto 0..len(kept)-1, keeping only kept columns"""
    lookup = -np.ones(int(max(kept.max(), max(s.active.max() for s in stats))) + 1, dtype=np.int64)
    lookup[kept] = np.arange(kept.size)
    out = []
    for s in sorted(stats, key=lambda s: s.i):
        cols = lookup[s.active]
        mask = cols >= 0
        new = StratumStats(**{**s.__dict__})
        new.i = int(lookup[s.i])
        new.active = cols[mask]
        new.psi_series = np.asfortranarray(s.psi_series[:, mask])
        new.Fbar_row = s.Fbar_row[kept]
        out.append(new)
    return out

