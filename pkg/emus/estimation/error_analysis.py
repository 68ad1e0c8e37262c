"""Asymptotic error analysis of EMUS estimates.

Covers the group inverse of I - F, integrated (cross-)autocovariances of the
retained trajectory series, the delta-method variance of pi_US[g], hitting
probabilities of the index chain, the variance upper bounds built from them,
and the sensitivities d log w_k / dF_ij.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy import fft, linalg, sparse
from scipy.sparse import linalg as splinalg

from emus.config import settings
from emus.errors import EstimationError
from emus.estimation.estimator import (
    OverlapMatrix,
    StratumStats,
    WeightVector,
    emus_estimate,
    stationary_vector,
)
from emus.sampling.chains import Trajectory

logger = logging.getLogger(__name__)

MatrixLike = Union[OverlapMatrix, np.ndarray]


def _matrix(F: MatrixLike) -> np.ndarray:
    return F.F if isinstance(F, OverlapMatrix) else np.asarray(F, dtype=float)


# ============= Group inverse =============
@dataclass
class GroupInverse:
    A_sharp: np.ndarray
    w: np.ndarray

    def residuals(self, F: MatrixLike) -> Tuple[float, float, float]:
        """Max-norm residuals of A A# A = A, A# A A# = A# and A A# = A# A"""
        A = np.eye(self.w.size) - _matrix(F)
        G = self.A_sharp
        norm = lambda M: float(np.max(np.sum(np.abs(M), axis=1)))
        return norm(A @ G @ A - A), norm(G @ A @ G - G), norm(A @ G - G @ A)


def group_inverse(F: MatrixLike, w: Optional[np.ndarray] = None) -> GroupInverse:
    """(I - F)^# for an irreducible stochastic F.

    Partitions A = I - F as [[U, c], [d, alpha]] with U = A[:-1, :-1], which
    is nonsingular for irreducible F, and forms
    A^# = (I - W) [[U^-1, 0], [0, 0]] (I - W) with W = 1 w^T.

    Args:
        F: the overlap (transition) matrix
        w: stationary vector of F; computed with ``stationary_vector`` if None

    Raises:
        ReducibleError: if F is reducible
    """
    M = _matrix(F)
    n = M.shape[0]
    if w is None:
        w = stationary_vector(M).z
    if n == 1:
        return GroupInverse(A_sharp=np.zeros((1, 1)), w=np.ones(1))
    A = np.eye(n) - M
    U = A[:-1, :-1]
    try:
        Uinv = linalg.inv(U)
    except linalg.LinAlgError as e:
        raise EstimationError(f"Leading block of I - F is singular: {e}")
    X = np.zeros((n, n))
    X[:-1, :-1] = Uinv
    IW = np.eye(n) - np.outer(np.ones(n), w)
    return GroupInverse(A_sharp=IW @ X @ IW, w=np.asarray(w, dtype=float))


def derivative_direction(F: MatrixLike, H: np.ndarray, ginv: Optional[GroupInverse] = None) -> np.ndarray:
    """Directional derivative w'(F) H = w(F) H (I - F)^# for row-zero-sum H"""
    ginv = ginv or group_inverse(F)
    return ginv.w @ np.asarray(H, dtype=float) @ ginv.A_sharp


def log_weight_derivatives(F: MatrixLike, ginv: Optional[GroupInverse] = None) -> np.ndarray:
    """Tensor D[i, j, k] = d log w_k / dF_ij along e_i (e_j - e_i)^T.

    D[i, j, k] = w_i ((I-F)^#_jk - (I-F)^#_ik) / w_k, with D[i, i, :] = 0.
    """
    ginv = ginv or group_inverse(F)
    w, G = ginv.w, ginv.A_sharp
    if np.any(w <= 0):
        raise EstimationError("Log derivatives need a strictly positive weight vector")
    D = w[:, None, None] * (G[None, :, :] - G[:, None, :]) / w[None, None, :]
    idx = np.arange(w.size)
    D[idx, idx, :] = 0.0
    return D


# ============= Autocovariance =============
class AutocovEstimate(BaseModel):
    value: float
    tau: float
    window: int
    reliable: bool


def _acov_fft(x: np.ndarray, y: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Lagged covariances (1/T) sum_s x_s y_{s+t} for t >= 0, and for y against x"""
    T = x.size
    n = fft.next_fast_len(2 * T)
    xd = x - x.mean()
    fx = fft.rfft(xd, n)
    if y is None:
        c = fft.irfft(fx.conj() * fx, n)[:T] / T
        return c, c
    yd = y - y.mean()
    fy = fft.rfft(yd, n)
    cxy = fft.irfft(fx.conj() * fy, n)[:T] / T
    cyx = fft.irfft(fy.conj() * fx, n)[:T] / T
    return cxy, cyx


def _window(acov: np.ndarray, c: float) -> Tuple[float, int, bool]:
    """Self-consistent window: grow t until t > c * tau, tau = 1 + 2 sum rho(t)"""
    T = acov.size
    if acov[0] <= 0:
        return 1.0, 0, True
    rho = acov / acov[0]
    tau = 1.0
    limit = T // 2
    for t in range(1, limit + 1):
        if t > c * tau:
            return tau, t - 1, True
        tau += 2.0 * rho[t]
    return tau, limit, False


def integrated_autocov(
    x: np.ndarray,
    y: Optional[np.ndarray] = None,
    c: Optional[float] = None,
    window: Optional[int] = None,
    min_length: Optional[int] = None,
) -> AutocovEstimate:
    """Integrated autocovariance sum_t C(t) of a series, or of a pair.

    For a pair the window is the larger of the two self-consistent windows
    and the value is C_xy(0) + sum_{t=1}^W (C_xy(t) + C_yx(t)).

    Raises:
        ValueError: series shorter than ``min_length`` or of unequal length
    """
    c = c or settings.acor_window
    min_length = settings.acor_min_length if min_length is None else min_length
    x = np.asarray(x, dtype=float).ravel()
    if x.size < max(min_length, 2):
        raise ValueError(f"Series of length {x.size} is shorter than {min_length}")
    if y is not None:
        y = np.asarray(y, dtype=float).ravel()
        if y.size != x.size:
            raise ValueError("`x` and `y` must have the same length")

    cxx, _ = _acov_fft(x)
    tau, W, reliable = _window(cxx, c)
    if y is None:
        if window is not None:
            W = window
        value = cxx[0] + 2.0 * np.sum(cxx[1:W + 1])
    else:
        cyy, _ = _acov_fft(y)
        tau_y, W_y, ok_y = _window(cyy, c)
        tau, W, reliable = max(tau, tau_y), max(W, W_y), reliable and ok_y
        if window is not None:
            W = window
        cxy, cyx = _acov_fft(x, y)
        value = cxy[0] + np.sum(cxy[1:W + 1]) + np.sum(cyx[1:W + 1])
    if not reliable:
        logger.warning(f"Autocovariance window reached half the series length ({x.size}); estimate is unreliable")
    return AutocovEstimate(value=float(value), tau=float(tau), window=int(W), reliable=reliable)


def covariance_matrix(Y: np.ndarray, c: Optional[float] = None) -> Tuple[np.ndarray, bool]:
    """Asymptotic covariance of the column means of a multivariate series.

    Uses one common window (the largest self-consistent window over the
    columns), then symmetrizes and projects onto the PSD cone.
    """
    c = c or settings.acor_window
    Y = np.asarray(Y, dtype=float)
    T, m = Y.shape
    n = fft.next_fast_len(2 * T)
    spectra = fft.rfft(Y - Y.mean(axis=0), n, axis=0)
    W, reliable = 0, True
    for a in range(m):
        acov = fft.irfft(spectra[:, a].conj() * spectra[:, a], n)[:T] / T
        _, Wa, ok = _window(acov, c)
        W, reliable = max(W, Wa), reliable and ok
    S = np.zeros((m, m))
    for a in range(m):
        for b in range(a, m):
            cab = fft.irfft(spectra[:, a].conj() * spectra[:, b], n)
            # negative lags sit at the end of the circular buffer
            S[a, b] = (cab[0] + np.sum(cab[1:W + 1]) + (np.sum(cab[n - W:n]) if W else 0.0)) / T
            S[b, a] = S[a, b]
    vals, vecs = linalg.eigh(S)
    if vals.min() < 0:
        S = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return S, reliable


# ============= Stratum covariances and the variance formula =============
@dataclass
class StratumCovariance:
    """Asymptotic covariance blocks of (Fbar_i., hbar_i) for one stratum.

    ``sigma_i`` and ``rho_i`` cover the columns in ``active`` only; with
    ``active=None`` they are full L x L and length-L arrays.
    """

    sigma_i: np.ndarray
    rho_i: np.ndarray
    tau_i: float
    kappa_i: float
    reliable: bool = True
    active: Optional[np.ndarray] = None

    def quadratic(self, u: np.ndarray) -> float:
        """u . sigma^i u + 2 u . rho_i + tau_i"""
        ua = u if self.active is None else u[self.active]
        return float(ua @ self.sigma_i @ ua + 2.0 * ua @ self.rho_i + self.tau_i)

    def trace(self) -> float:
        return float(np.trace(self.sigma_i))

    def dense(self, L: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.active is None:
            return self.sigma_i, self.rho_i
        sigma, rho = np.zeros((L, L)), np.zeros(L)
        sigma[np.ix_(self.active, self.active)] = self.sigma_i
        rho[self.active] = self.rho_i
        return sigma, rho


def _sweep_series(s: StratumStats, Y: np.ndarray) -> Tuple[np.ndarray, int]:
    if s.n_walkers > 1 and Y.shape[0] % s.n_walkers == 0:
        sweeps = Y.shape[0] // s.n_walkers
        return Y.reshape((sweeps, s.n_walkers) + Y.shape[1:]).mean(axis=1), s.n_walkers
    return Y, 1


def stratum_covariance(
    s: StratumStats,
    L: int,
    N_total: int,
    h_series: Optional[np.ndarray] = None,
) -> StratumCovariance:
    """sigma^i, rho_i, tau_i and kappa_i = N_i / N from the retained series.

    ``h_series`` is the scalar series paired with the psi* columns
    (g* by default). Ensemble trajectories are averaged over walkers per
    sweep and rescaled to a per-sample covariance. Rows and columns of
    sigma^i vanish outside the active columns, so only that block is kept.
    """
    h = s.g_series if h_series is None else np.asarray(h_series, dtype=float)
    Y = np.column_stack([s.psi_series, h])
    Y, scale = _sweep_series(s, Y)
    reliable = True
    if Y.shape[0] >= max(settings.acor_min_length, 2):
        S, reliable = covariance_matrix(Y)
    else:
        logger.warning(f"stratum {s.i}: {Y.shape[0]} samples, using lag-zero covariance only")
        S = np.atleast_2d(np.cov(Y, rowvar=False, bias=True))
        reliable = False
    S = S * scale
    m = s.active.size
    if m and s.active.max() >= L:
        raise ValueError(f"stratum {s.i}: active column {s.active.max()} outside 0..{L - 1}")
    return StratumCovariance(
        sigma_i=S[:m, :m].copy(), rho_i=S[:m, m].copy(), tau_i=float(S[m, m]),
        kappa_i=s.N / N_total, reliable=reliable, active=s.active.copy(),
    )


class VarianceReport(BaseModel):
    """Delta-method variance of an EMUS estimate, with optional bound"""

    estimate: Optional[float] = None
    sigma2_us: float
    terms: List[float]
    n_total: Optional[int] = None
    std_error: Optional[float] = None
    relative_std_error: Optional[float] = None
    bound: Optional[float] = None
    bound_use: Optional[str] = None
    bound_scale: Optional[str] = None
    hitting_probs: Optional[List[List[float]]] = None
    unreliable_strata: List[int] = []
    clipped: bool = False


def sigma2_us(
    F: MatrixLike,
    z: Union[WeightVector, np.ndarray],
    covs: Sequence[StratumCovariance],
    gfrak: np.ndarray,
    ginv: Optional[GroupInverse] = None,
) -> VarianceReport:
    """sum_i z_i^2 / kappa_i { u . sigma^i u + 2 u . rho_i + tau_i }, u = (I-F)^# gfrak"""
    zz = z.z if isinstance(z, WeightVector) else np.asarray(z, dtype=float)
    if len(covs) != zz.size:
        raise ValueError(f"{len(covs)} stratum covariances for {zz.size} strata")
    if any(cv.kappa_i <= 0 for cv in covs):
        raise ValueError("Every sampling fraction `kappa_i` must be positive")
    ginv = ginv or group_inverse(F, zz)
    u = ginv.A_sharp @ np.asarray(gfrak, dtype=float)
    terms = np.array([
        zi ** 2 / cv.kappa_i * cv.quadratic(u)
        for zi, cv in zip(zz, covs)
    ])
    total = float(terms.sum())
    clipped = False
    if total < 0:
        if total < -1e-10:
            logger.warning(f"Negative variance estimate {total:.3e} clipped to 0")
        total, clipped = 0.0, True
    return VarianceReport(
        sigma2_us=total,
        terms=terms.tolist(),
        unreliable_strata=[i for i, cv in enumerate(covs) if not cv.reliable],
        clipped=clipped,
    )


# ============= Hitting probabilities and bounds =============
def _first_step(M: np.ndarray, i: int, j: int, dense: bool) -> float:
    n = M.shape[0]
    rest = np.setdiff1d(np.arange(n), [i, j])
    if rest.size == 0:
        return float(M[i, j])
    if dense:
        A = np.eye(rest.size) - M[np.ix_(rest, rest)]
        h = linalg.solve(A, M[rest, j])
    else:
        Ms = sparse.csr_matrix(M)[rest][:, rest]
        A = sparse.identity(rest.size, format="csc") - Ms.tocsc()
        h = splinalg.spsolve(A, M[rest, j])
    return float(M[i, j] + M[i, rest] @ h)


def hitting_probabilities(
    F: MatrixLike,
    pairs: Optional[Sequence[Tuple[int, int]]] = None,
    method: Literal["solve", "group_inverse"] = "solve",
    ginv: Optional[GroupInverse] = None,
) -> np.ndarray:
    """Matrix of P_i[t_j < t_i] for the chain with transition matrix F.

    ``method="solve"`` uses first-step analysis: h = P_x[hit j before i]
    solves (I - F_SS) h = F_Sj on the other states S, and
    P_i[t_j < t_i] = F_ij + F_iS h. ``method="group_inverse"`` uses mean
    first passage times from (I-F)^#,
    P_i[t_j < t_i] = 1 / (w_i (m_ij + m_ji)), m_ij = (A#_jj - A#_ij) / w_j.

    Entries not in ``pairs`` (and the diagonal) are NaN; all pairs i != j
    by default.

    Raises:
        ReducibleError: if F is reducible
    """
    M = _matrix(F)
    n = M.shape[0]
    if ginv is None and method == "group_inverse":
        ginv = group_inverse(M)
    elif ginv is None:
        # irreducibility check
        stationary_vector(M)
    if pairs is None:
        pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    P = np.full((n, n), np.nan)
    if method == "group_inverse":
        G, w = ginv.A_sharp, ginv.w
        d = np.diag(G)
        mfpt = (d[None, :] - G) / w[None, :]
        for i, j in pairs:
            P[i, j] = 1.0 / (w[i] * (mfpt[i, j] + mfpt[j, i]))
    else:
        dense = n <= 200
        for i, j in pairs:
            P[i, j] = _first_step(M, i, j, dense)
    return P


@dataclass
class GStats:
    """Plug-in pi[|g|] and var_pi(g) used to scale the variance bound"""

    abs_mean: float
    variance: float


def variance_upper_bound(
    F: MatrixLike,
    z: Union[WeightVector, np.ndarray],
    covs: Sequence[StratumCovariance],
    g_stats: GStats,
    use: Literal["hitting", "overlap"] = "hitting",
    scale: Literal["abs_mean", "variance"] = "abs_mean",
    hitting: Optional[np.ndarray] = None,
) -> float:
    """2 sum_i kappa_i^-1 { tau_i z_i^2 + s tr(sigma^i) sum_{j != i, F_ij > 0} 1/p_ij^2 }

    p_ij is P_i[t_j < t_i] (``use="hitting"``) or F_ij (``use="overlap"``);
    s is pi[|g|]^2 (``scale="abs_mean"``) or var_pi(g) (``scale="variance"``).
    """
    M = _matrix(F)
    zz = z.z if isinstance(z, WeightVector) else np.asarray(z, dtype=float)
    s = g_stats.abs_mean ** 2 if scale == "abs_mean" else g_stats.variance
    n = M.shape[0]
    off = (M > 0) & ~np.eye(n, dtype=bool)
    if use == "hitting":
        if hitting is None:
            pairs = list(zip(*np.nonzero(off)))
            method = "solve" if n <= 200 else "group_inverse"
            hitting = hitting_probabilities(M, pairs=pairs, method=method)
        p = hitting
    elif use == "overlap":
        p = M
    else:
        raise ValueError(f"Unknown bound variant '{use}'")
    total = 0.0
    for i, cv in enumerate(covs):
        inv_sq = np.sum(1.0 / p[i, off[i]] ** 2) if off[i].any() else 0.0
        total += (cv.tau_i * zz[i] ** 2 + s * cv.trace() * inv_sq) / cv.kappa_i
    return float(2.0 * total)


# ============= Plug-in pipeline =============
def emus_error_report(
    stats: Sequence[StratumStats],
    z: Union[WeightVector, np.ndarray],
    F: MatrixLike,
    bound_use: Optional[Literal["hitting", "overlap"]] = "hitting",
    bound_scale: Literal["abs_mean", "variance"] = "abs_mean",
    max_workers: Optional[int] = None,
) -> VarianceReport:
    """Plug-in variance of pi_US[g] from the retained series.

    Works for any bias family: with B the estimate and D = sum z_i onebar*_i,
    the series h* = (g* - B 1*) / D plays the role of g. Under a partition
    of unity this is the usual formula.
    """
    zz = z.z if isinstance(z, WeightVector) else np.asarray(z, dtype=float)
    stats = list(stats)
    L = len(stats)
    B = emus_estimate(stats, zz)
    D = float(sum(zi * s.onebar_star for zi, s in zip(zz, stats)))
    h_series = [(s.g_series - B * s.one_series) / D for s in stats]
    hfrak = np.array([h.mean() for h in h_series])
    N_total = sum(s.N for s in stats)

    workers = max_workers or settings.max_workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        covs = list(pool.map(lambda a: stratum_covariance(a[0], L, N_total, a[1]), zip(stats, h_series)))

    ginv = group_inverse(F, zz / zz.sum())
    report = sigma2_us(F, zz / zz.sum(), covs, hfrak, ginv)
    report.estimate = B
    report.n_total = N_total
    report.std_error = float(np.sqrt(report.sigma2_us / N_total))
    report.relative_std_error = report.std_error / abs(B) if B != 0 else None

    if bound_use is not None:
        abs_mean = sum(zi * np.mean(np.abs(s.g_series)) for zi, s in zip(zz, stats)) / D
        second = sum(zi * np.mean(s.g_series ** 2 * s.psi_total) for zi, s in zip(zz, stats)) / D
        g_stats = GStats(abs_mean=float(abs_mean), variance=float(max(second - B ** 2, 0.0)))
        M = _matrix(F)
        hitting = None
        if bound_use == "hitting":
            off = (M > 0) & ~np.eye(L, dtype=bool)
            pairs = list(zip(*np.nonzero(off)))
            hitting = hitting_probabilities(M, pairs=pairs, method="solve" if L <= 200 else "group_inverse", ginv=ginv)
            if L <= 200:
                report.hitting_probs = np.nan_to_num(hitting, nan=0.0).tolist()
        report.bound = variance_upper_bound(M, zz / zz.sum(), covs, g_stats, bound_use, bound_scale, hitting)
        report.bound_use, report.bound_scale = bound_use, bound_scale
    logger.info(f"Asymptotic variance {report.sigma2_us:.4e}, std error {report.std_error:.4e}")
    return report


# ============= Reference estimators =============
class DirectEstimate(BaseModel):
    estimate: float
    std_error: float
    tau: float
    n: int
    reliable: bool


def direct_estimate(samples: Union[Trajectory, np.ndarray], g=None) -> DirectEstimate:
    """Plain trajectory average with an integrated-autocovariance standard error"""
    if isinstance(samples, Trajectory):
        values = samples.states if g is None else np.asarray(g(samples.states), dtype=float)
        values = np.asarray(values, dtype=float).reshape(len(samples), -1)[:, 0]
        walkers = samples.n_walkers
    else:
        values = np.asarray(samples if g is None else g(samples), dtype=float).ravel()
        walkers = 1
    n = values.size
    series = values.reshape(-1, walkers).mean(axis=1) if walkers > 1 else values
    if series.size >= max(settings.acor_min_length, 2):
        ac = integrated_autocov(series)
        var, tau, reliable = ac.value * walkers, ac.tau, ac.reliable
    else:
        var, tau, reliable = float(np.var(values)), 1.0, False
    return DirectEstimate(
        estimate=float(values.mean()), std_error=float(np.sqrt(max(var, 0.0) / n)),
        tau=tau, n=n, reliable=reliable,
    )


def replicate_variance(estimates: Sequence[float], N: int) -> float:
    """N times the sample variance of independent replicate estimates"""
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise ValueError("Need at least two replicates")
    return float(N * np.var(est, ddof=1))
