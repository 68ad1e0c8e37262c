"""Marginal densities in a collective variable, and stratified run scheduling.

Marginals are EMUS averages of histogram-bin indicators divided by the bin
volume. The collective-variable value of every retained sample is cached on
its ``StratumStats`` so the analysis grid can differ from the
stratification grid without resampling.
"""
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from emus.bias.families import BiasSet, as_points
from emus.bias.support import support_graph
from emus.config import settings
from emus.errors import EstimationError, SamplingError
from emus.estimation.error_analysis import group_inverse
from emus.estimation.estimator import (
    EmusResult,
    OverlapMatrix,
    StratumStats,
    WeightVector,
    run_emus,
)
from emus.sampling.chains import StratumDensity, Trajectory, pick_start, stratum_seed
from emus.sampling.dispatch import SamplerSpec, run_chain
from emus.sampling.target import TargetModel

logger = logging.getLogger(__name__)

N_BATCHES = 25


# ============= Histogram grid =============
class HistogramGrid(BaseModel):
    """Regular grid of bins over [lo, hi] in an l-dimensional cv space"""

    model_config = ConfigDict(frozen=True)

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    bins: Tuple[int, ...]

    @model_validator(mode="after")
    def _check(self):
        if not (len(self.lo) == len(self.hi) == len(self.bins)):
            raise ValueError("lo, hi and bins must have one entry per axis")
        if any(b < 1 for b in self.bins):
            raise ValueError("bins must be at least 1 on every axis")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("hi must exceed lo on every axis")
        return self

    @classmethod
    def regular(cls, lo: float, hi: float, bins: int, dim: int = 1) -> "HistogramGrid":
        return cls(lo=(lo,) * dim, hi=(hi,) * dim, bins=(bins,) * dim)

    @property
    def dim(self) -> int:
        return len(self.bins)

    @property
    def n_bins(self) -> int:
        return int(np.prod(self.bins))

    @property
    def widths(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.bins)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * self.widths

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def centers(self) -> np.ndarray:
        """Bin centres in row-major order, shape (n_bins, dim)"""
        axes = [l + (np.arange(b) + 0.5) * w for l, b, w in zip(self.lo, self.bins, self.widths)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def bin_index(self, theta: np.ndarray) -> np.ndarray:
        """Flat bin index of each row of ``theta``; -1 outside the grid"""
        theta = as_points(theta, self.dim)
        cell = np.floor((theta - np.array(self.lo)) / self.widths).astype(np.int64)
        inside = np.all((cell >= 0) & (cell < np.array(self.bins)), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(cell, 0, np.array(self.bins) - 1).T), self.bins)
        return np.where(inside, flat, -1)


# ============= Marginal estimates =============
class MarginalReport(BaseModel):
    """Per-bin density, standard error and sample counts; None marks empty bins"""

    lo: List[float]
    hi: List[float]
    bins: List[int]
    density: List[Optional[float]]
    std_error: List[Optional[float]]
    counts: List[int]

    @property
    def grid(self) -> HistogramGrid:
        return HistogramGrid(lo=tuple(self.lo), hi=tuple(self.hi), bins=tuple(self.bins))

    def density_array(self) -> np.ndarray:
        return np.array([np.nan if d is None else d for d in self.density])

    def error_array(self) -> np.ndarray:
        return np.array([np.nan if e is None else e for e in self.std_error])

    @property
    def empty(self) -> np.ndarray:
        return np.array(self.counts) == 0

    def integral(self) -> float:
        """sum of density * bin volume over non-empty bins"""
        return float(np.nansum(self.density_array()) * self.grid.volume)

    def log10_surface(self) -> np.ndarray:
        """log10 density shaped like the grid; NaN where empty or nonpositive"""
        d = self.density_array()
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(d > 0, np.log10(d), np.nan)
        return out.reshape(self.bins)

    def to_frame(self) -> pd.DataFrame:
        centers = self.grid.centers()
        frame = pd.DataFrame(centers, columns=[f"theta{a}" for a in range(centers.shape[1])])
        frame["density"] = self.density_array()
        frame["std_error"] = self.error_array()
        frame["count"] = self.counts
        frame["empty"] = self.empty
        return frame

    def save(self, directory: Union[str, Path], name: str = "marginal") -> Dict[str, Path]:
        """Write <name>.csv, <name>.json and <name>_log10.csv"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "csv": directory / f"{name}.csv",
            "json": directory / f"{name}.json",
            "log10": directory / f"{name}_log10.csv",
        }
        self.to_frame().to_csv(paths["csv"], index=False)
        paths["json"].write_text(self.model_dump_json(indent=2))
        surface = self.log10_surface()
        pd.DataFrame(surface.reshape(surface.shape[0], -1)).to_csv(paths["log10"], index=False, header=False)
        logger.info(f"Saved marginal '{name}' ({len(self.counts)} bins) to {directory}")
        return paths


def _check_region(grid: HistogramGrid, bias: Optional[BiasSet]) -> None:
    if bias is None:
        return
    lo, hi = bias.support_boxes()
    if lo.shape[1] != grid.dim:
        return
    glo, ghi = np.array(grid.lo), np.array(grid.hi)
    hit = np.all((lo < ghi) & (hi > glo), axis=1)
    if not hit.any():
        raise EstimationError(f"Histogram grid [{grid.lo}, {grid.hi}] lies outside the stratified region")


def _batches(n: int, n_walkers: int = 1) -> Tuple[np.ndarray, int]:
    """Batch label of every sample; batches hold whole ensemble sweeps"""
    unit = n_walkers if n_walkers > 1 and n % n_walkers == 0 else 1
    units = n // unit
    nb = max(2, min(N_BATCHES, units // 2)) if units >= 4 else 1
    per = units // nb
    label = np.minimum(np.arange(units) // max(per, 1), nb - 1)
    return np.repeat(label, unit), nb


def _as_report(grid: HistogramGrid, density: np.ndarray, errors: np.ndarray, counts: np.ndarray) -> MarginalReport:
    as_list = lambda a: [None if not np.isfinite(v) else float(v) for v in a]
    return MarginalReport(
        lo=list(grid.lo), hi=list(grid.hi), bins=list(grid.bins),
        density=as_list(density), std_error=as_list(errors), counts=counts.tolist(),
    )


def estimate_marginal(
    stats: Sequence[StratumStats],
    z: Union[WeightVector, np.ndarray],
    grid: HistogramGrid,
    F: Optional[Union[OverlapMatrix, np.ndarray]] = None,
    bias: Optional[BiasSet] = None,
) -> MarginalReport:
    """EMUS estimate of pi[b] / |b| for every bin b, with standard errors.

    Standard errors use the delta-method variance of each bin average with
    batch-means covariances (whole sweeps per batch for ensemble runs).
    They are omitted (None) when ``F`` is not given.

    Raises:
        EstimationError: cv values were not retained, or the grid misses the
            stratified region
    """
    zz = z.z if isinstance(z, WeightVector) else np.asarray(z, dtype=float)
    stats = list(stats)
    if any(s.cv_values is None for s in stats):
        raise EstimationError("Collective-variable values were not retained; accumulate with `cv`")
    _check_region(grid, bias)
    nb_total = grid.n_bins
    D = float(sum(zi * s.onebar_star for zi, s in zip(zz, stats)))

    bin_ids, sums, counts = [], np.zeros((len(stats), nb_total)), np.zeros(nb_total, dtype=np.int64)
    for r, s in enumerate(stats):
        ids = grid.bin_index(s.cv_values.reshape(s.N, -1))
        bin_ids.append(ids)
        ok = ids >= 0
        sums[r] = np.bincount(ids[ok], weights=s.one_series[ok], minlength=nb_total)
        counts += np.bincount(ids[ok], minlength=nb_total)
    if counts.sum() == 0:
        raise EstimationError(f"No retained sample falls inside the histogram grid [{grid.lo}, {grid.hi}]")
    N = np.array([s.N for s in stats], dtype=float)
    B = (zz / N) @ sums / D
    density = B / grid.volume
    density[counts == 0] = np.nan

    errors = np.full(nb_total, np.nan)
    if F is not None:
        var = _bin_variances(stats, zz, F, bin_ids, B, D, nb_total)
        errors = np.sqrt(np.maximum(var, 0.0) / N.sum()) / grid.volume
        errors[counts == 0] = np.nan
    n_empty = int((counts == 0).sum())
    if n_empty:
        logger.info(f"{n_empty} of {nb_total} bins have no samples")
    return _as_report(grid, density, errors, counts)


def _bin_variances(stats, zz, F, bin_ids, B, D, n_bins) -> np.ndarray:
    """Delta-method asymptotic variance of every bin average"""
    L = len(stats)
    N_total = sum(s.N for s in stats)
    w = zz / zz.sum()
    G = group_inverse(F, w).A_sharp
    per_stratum = []
    for s, ids in zip(stats, bin_ids):
        label, nb = _batches(s.N, s.n_walkers)
        bs = s.N / nb
        psi_b = np.stack([np.bincount(label, weights=s.psi_series[:, c], minlength=nb) for c in range(s.active.size)], axis=1) / bs
        one_b = np.bincount(label, weights=s.one_series, minlength=nb)
        ok = ids >= 0
        visited = np.unique(ids[ok])
        col = np.searchsorted(visited, ids[ok])
        C = np.zeros((nb, visited.size))
        np.add.at(C, (label[ok], col), s.one_series[ok])
        per_stratum.append((psi_b - psi_b.mean(axis=0), one_b - one_b.mean(), visited, C - C.mean(axis=0), nb, bs, C.sum(axis=0)))

    var = np.zeros(n_bins)
    chunk = max(1, (1 << 22) // max(L, 1))
    for start in range(0, n_bins, chunk):
        stop = min(start + chunk, n_bins)
        Bc = B[start:stop]
        hfrak = np.zeros((L, stop - start))
        for r, (s, item) in enumerate(zip(stats, per_stratum)):
            visited, totals = item[2], item[6]
            hfrak[r] = -Bc * s.onebar_star
            sel = (visited >= start) & (visited < stop)
            hfrak[r, visited[sel] - start] += totals[sel] / s.N
        hfrak /= D
        U = G @ hfrak
        for r, (s, item) in enumerate(zip(stats, per_stratum)):
            psi_c, one_c, visited, Cc, nb, bs = item[:6]
            if nb < 2:
                var[start:stop] = np.nan
                continue
            Q = psi_c @ U[s.active] - np.outer(one_c, Bc) / (bs * D)
            sel = (visited >= start) & (visited < stop)
            Q[:, visited[sel] - start] += Cc[:, sel] / (bs * D)
            kappa = s.N / N_total
            var[start:stop] += w[r] ** 2 / kappa * bs * np.sum(Q ** 2, axis=0) / (nb - 1)
    return var


def direct_marginal(
    trajectories: Sequence[Trajectory],
    grid: HistogramGrid,
    cv: Callable[[np.ndarray], np.ndarray],
) -> MarginalReport:
    """Histogram density of unbiased runs, with batch-means standard errors.

    Independent runs are averaged with equal weight.
    """
    if not trajectories:
        raise ValueError("`trajectories` must be nonempty")
    n_bins = grid.n_bins
    counts = np.zeros(n_bins, dtype=np.int64)
    means, variances = [], []
    for traj in trajectories:
        n = len(traj)
        ids = grid.bin_index(np.asarray(cv(traj.states), dtype=float).reshape(n, -1))
        ok = ids >= 0
        counts += np.bincount(ids[ok], minlength=n_bins)
        means.append(np.bincount(ids[ok], minlength=n_bins) / n)
        label, nb = _batches(n, traj.n_walkers)
        if nb < 2:
            variances.append(np.full(n_bins, np.nan))
            continue
        C = np.zeros((nb, n_bins))
        np.add.at(C, (label[ok], ids[ok]), 1.0)
        batch_means = C / np.bincount(label, minlength=nb)[:, None]
        variances.append(batch_means.var(axis=0, ddof=1) / nb)
    R = len(trajectories)
    density = np.mean(means, axis=0) / grid.volume
    errors = np.sqrt(np.sum(variances, axis=0)) / R / grid.volume
    density[counts == 0] = np.nan
    errors[counts == 0] = np.nan
    logger.info(f"Direct marginal from {R} runs: {int((counts > 0).sum())} of {n_bins} bins visited")
    return _as_report(grid, density, errors, counts)


# ============= Initialization schedule =============
class ScheduleEntry(BaseModel):
    stratum: int
    source: Literal["external", "stratum"]
    parent: Optional[int] = None
    depth: int = 0


class InitSchedule(BaseModel):
    """Sampling order; each entry is seeded from its parent (or externally)"""

    anchor: int
    entries: List[ScheduleEntry]
    skipped: List[int] = []

    @property
    def order(self) -> List[int]:
        return [e.stratum for e in self.entries]

    def by_depth(self) -> List[List[ScheduleEntry]]:
        levels: Dict[int, List[ScheduleEntry]] = {}
        for e in self.entries:
            levels.setdefault(e.depth, []).append(e)
        return [levels[d] for d in sorted(levels)]


def build_schedule(bias: BiasSet, anchor: int, seed_points: np.ndarray, target: Optional[TargetModel] = None) -> InitSchedule:
    """Breadth-first order over the support graph, starting from ``anchor``.

    Raises:
        SamplingError: no seed point lies in the anchor's support
    """
    seed_points = np.asarray(seed_points, dtype=float)
    if seed_points.size == 0:
        raise ValueError("`seed_points` must be nonempty")
    if seed_points.ndim == 1:
        seed_points = seed_points.reshape(-1, 1) if (bias.input_dim or 1) == 1 else seed_points.reshape(1, -1)
    if not np.any(bias.component(seed_points, anchor, strict=False) > 0):
        raise SamplingError("no seed point lies in the anchor stratum's support", anchor)

    graph = support_graph(bias)
    entries = [ScheduleEntry(stratum=anchor, source="external", depth=0)]
    seen = {anchor}
    queue = deque([(anchor, 0)])
    while queue:
        i, depth = queue.popleft()
        for j in graph.neighbors(i):
            j = int(j)
            if j not in seen:
                seen.add(j)
                entries.append(ScheduleEntry(stratum=j, source="stratum", parent=i, depth=depth + 1))
                queue.append((j, depth + 1))
    skipped = sorted(set(range(bias.n_strata)) - seen)
    logger.info(f"Schedule from anchor {anchor}: {len(entries)} strata, {len(skipped)} unreachable")
    return InitSchedule(anchor=anchor, entries=entries, skipped=skipped)


@dataclass
class StratifiedRun:
    """Trajectories, statistics and bookkeeping of one scheduled run"""

    trajectories: Dict[int, Trajectory]
    stats: List[StratumStats]
    skipped: List[int]
    acceptance: Dict[int, float]
    result: Optional[EmusResult] = None

    @property
    def visited(self) -> List[int]:
        return sorted(self.trajectories)


def run_stratified(
    target: TargetModel,
    bias: BiasSet,
    schedule: InitSchedule,
    sampler: SamplerSpec,
    seed_points: np.ndarray,
    g: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    cv: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    base_seed: int = 0,
    replicate: int = 0,
    potential=None,
    beta: float = 1.0,
    max_workers: Optional[int] = None,
) -> StratifiedRun:
    """Sample the strata of ``schedule`` level by level and run EMUS on them.

    Each stratum starts from points drawn (with replacement) from the
    in-support states of its already-sampled neighbours at smaller depth,
    its parent first; the anchor starts from ``seed_points``. Strata whose
    candidates miss their support are skipped with a warning.
    """
    seed_points = np.asarray(seed_points, dtype=float).reshape(-1, target.dim)
    graph = support_graph(bias)
    trajectories: Dict[int, Trajectory] = {}
    depth_of = {e.stratum: e.depth for e in schedule.entries}
    skipped = list(schedule.skipped)

    def sample(entry: ScheduleEntry) -> Tuple[int, Optional[Trajectory]]:
        i = entry.stratum
        pick_seq, chain_seq = stratum_seed(base_seed, i, replicate).spawn(2)
        starts = None
        if sampler.kind != "iid":
            if entry.source == "external":
                candidates = seed_points
            else:
                sources = [entry.parent] + [
                    int(j) for j in graph.neighbors(i)
                    if j != entry.parent and depth_of.get(int(j), entry.depth) < entry.depth
                ]
                pools = [trajectories[j].states for j in sources if j in trajectories]
                candidates = np.concatenate(pools) if pools else np.empty((0, target.dim))
            try:
                starts = pick_start(candidates, StratumDensity(target, bias, i), np.random.default_rng(pick_seq), sampler.n_starts)
            except SamplingError:
                logger.warning(f"stratum {i}: no seed source has points in its support; skipping")
                return i, None
            if sampler.kind == "ensemble" and np.unique(starts, axis=0).shape[0] < 2:
                logger.warning(f"stratum {i}: only one distinct start point in its support; skipping")
                return i, None
        logger.debug(f"stratum {i}: sampling ({sampler.kind})")
        return i, run_chain(sampler, target, bias, i, starts, chain_seq, potential, beta)

    workers = max_workers or settings.max_workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for level in schedule.by_depth():
            for i, traj in pool.map(sample, level):
                if traj is None:
                    skipped.append(i)
                else:
                    trajectories[i] = traj
    skipped = sorted(skipped)
    if skipped:
        logger.warning(f"{len(skipped)} strata skipped: {skipped[:20]}{' ...' if len(skipped) > 20 else ''}")

    ordered = [trajectories[i] for i in sorted(trajectories)]
    result = run_emus(ordered, bias, g, cv, anchor=schedule.anchor)
    acceptance = {i: t.acceptance_rate for i, t in trajectories.items()}
    logger.info(f"Sampled {len(trajectories)} of {bias.n_strata} strata; kept {result.kept.size} after restriction")
    return StratifiedRun(trajectories, result.stats, skipped, acceptance, result)
