"""Config-driven experiment runs.

One run directory per experiment::

    <run dir>/summary.json            aggregate + per-replicate summaries
    <run dir>/estimate_report.json    replicate 0
    <run dir>/variance_report.json    replicate 0
    <run dir>/matrices/               overlap, weights, group inverse, hitting probabilities
    <run dir>/marginals/              marginal surfaces (and direct comparisons)
    <run dir>/replicates/             one summary per replicate
    <run dir>/trajectories/           only with save_trajectories
    <run dir>/logs/run.log

Summaries hold no timestamps or paths, so fixed seeds give identical files.
"""
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
import dataclasses
from dataclasses import dataclass
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import stats as sp_stats

from emus.bias.families import BiasSet
from emus.config import settings
from emus.db import crud
from emus.db.base import Database
from emus.errors import ConfigError, EmusError
from emus.estimation.error_analysis import (
    VarianceReport,
    direct_estimate,
    emus_error_report,
    group_inverse,
    replicate_variance,
)
from emus.estimation.estimator import emus_estimate, iterative_emus
from emus.estimation.marginals import (
    InitSchedule,
    MarginalReport,
    StratifiedRun,
    build_schedule,
    direct_marginal,
    estimate_marginal,
    run_stratified,
)
from emus.experiments.config import ExperimentConfig, MarginalSpec
from emus.models.mixture import (
    Dataset,
    MixturePosteriorTarget,
    hyperparameters,
    synthetic_dataset,
    unboundedness_check,
)
from emus.sampling.chains import StratumDensity, Trajectory, pick_start, stratum_seed
from emus.sampling.dispatch import SamplerSpec, direct_chain
from emus.sampling.storage import save_trajectory
from emus.sampling.target import Linear, Quadratic, TargetModel, quadrature_expectation, target_from_potential
from emus.utils.data_loader import ingest_data

logger = logging.getLogger(__name__)

MAX_DENSE_EXPORT = 500


# ============= Reports =============
class ReplicateReport(BaseModel):
    replicate: int
    seed: int
    n_strata: int
    n_sampled: int
    kept: List[int]
    dropped: List[int]
    skipped: List[int]
    n_total: int
    estimate: float
    reference: Optional[float] = None
    relative_error: Optional[float] = None
    std_error: Optional[float] = None
    relative_std_error: Optional[float] = None
    sigma2_us: Optional[float] = None
    bound: Optional[float] = None
    iterative_estimate: Optional[float] = None
    iterations: Optional[int] = None
    iterative_converged: Optional[bool] = None
    acceptance_mean: float
    acceptance_min: float
    overlap_diagonal: List[float]
    marginal_integrals: Dict[str, float] = {}
    unreliable_strata: List[int] = []


class ComparisonReport(BaseModel):
    replicate: int
    budget: int
    emus_estimate: float
    emus_std_error: Optional[float] = None
    direct_estimate: float
    direct_std_error: float
    direct_zero_hits: bool
    reference: Optional[float] = None
    emus_relative_error: Optional[float] = None
    direct_relative_error: Optional[float] = None
    # bins where each method has the smaller standard error
    emus_better_bins: Dict[str, int] = {}
    direct_better_bins: Dict[str, int] = {}


class Aggregate(BaseModel):
    n: int
    mean: float
    std: Optional[float] = None
    n_var: Optional[float] = None
    mean_relative_error: Optional[float] = None
    within_20pct: Optional[float] = None


class RunSummary(BaseModel):
    name: str
    experiment: str
    command: str = "run"
    config: Dict[str, Any]
    data: Optional[Dict[str, Any]] = None
    unbounded: Optional[Dict[str, Any]] = None
    aggregate: Aggregate
    replicates: List[ReplicateReport]
    comparisons: List[ComparisonReport] = []
    direct_aggregate: Optional[Aggregate] = None


# ============= Setup =============
@dataclass
class ExperimentSetup:
    """Everything a replicate needs, built once from the config"""

    config: ExperimentConfig
    target: TargetModel
    bias: BiasSet
    g: Callable[[np.ndarray], np.ndarray]
    potential: Any
    schedule: InitSchedule
    seed_points: np.ndarray
    cv: Optional[Callable[[np.ndarray], np.ndarray]]
    cv_columns: Dict[str, slice]
    reference: Optional[float] = None
    data: Optional[Dataset] = None

    @property
    def workers(self) -> int:
        return self.config.max_workers or settings.max_workers


def _build_target(config: ExperimentConfig) -> Tuple[TargetModel, Any, Optional[Dataset]]:
    spec = config.target
    if spec.is_mixture:
        m = spec.mixture
        if m.data_path:
            data = ingest_data(m.data_path)
        else:
            syn = m.synthetic
            data = synthetic_dataset(m.K, syn.n, syn.means, syn.sds, syn.weights, syn.seed, syn.decimals)
        hp = hyperparameters(data, m.K, m.alpha, m.g)
        return MixturePosteriorTarget(data, m.K, hp, m.constrained), None, data
    potential = spec.build_potential()
    target = target_from_potential(potential, spec.beta, spec.dim, spec.domain.build(), spec.potential)
    return target, potential, None


def _default_seed_points(config: ExperimentConfig, target: TargetModel, bias: BiasSet) -> np.ndarray:
    if isinstance(target, MixturePosteriorTarget):
        return target.initial_walkers(max(config.sampler.n_starts, 10), seed=config.seed)
    if not bias.boxes_in_state_space:
        raise ConfigError("seed points are required for this bias family", ("schedule", "seed_points"))
    anchor = config.schedule.anchor or 0
    lo, hi = (b[anchor] for b in bias.support_boxes())
    point = np.where(np.isfinite(hi), 0.5 * (lo + hi), lo + 0.5)
    return point.reshape(1, -1)


def _reference(config: ExperimentConfig, potential, g) -> Optional[float]:
    """Exact pi[g] for the analytic cases, or by quadrature in one dimension"""
    if config.reference == "none":
        return None
    spec, obs = config.target, config.observable
    if config.reference == "analytic":
        if obs.kind == "indicator_above" and obs.cv == "identity" and spec.dim == 1:
            t = obs.threshold
            if isinstance(potential, Linear) and spec.domain.kind == "half_line":
                return math.exp(-spec.beta * potential.slope * max(t - spec.domain.lo, 0.0))
            if isinstance(potential, Quadratic) and spec.domain.kind == "unconstrained":
                sd = 1.0 / math.sqrt(spec.beta * potential.stiffness)
                return float(sp_stats.norm.sf(t, loc=potential.center, scale=sd))
        raise ConfigError("no closed form for this target and observable", ("reference",))
    if spec.dim != 1 or spec.domain.kind not in ("box", "periodic") or potential is None:
        raise ConfigError("quadrature reference needs a one-dimensional bounded target", ("reference",))
    return quadrature_expectation(potential, g, spec.beta, (spec.domain.lo, spec.domain.hi))


def _combined_cv(marginals: List[MarginalSpec]) -> Tuple[Optional[Callable], Dict[str, slice]]:
    """One cv function stacking every marginal's variable; column slice per marginal"""
    if not marginals:
        return None, {}
    fns = [(m.name, m.cv_function(), len(m.bins)) for m in marginals]
    columns, start = {}, 0
    for name, _, width in fns:
        columns[name] = slice(start, start + width)
        start += width

    def cv(X: np.ndarray) -> np.ndarray:
        return np.column_stack([np.asarray(fn(X), dtype=float).reshape(X.shape[0], -1) for _, fn, _ in fns])

    return cv, columns


def _pilot_points(config: ExperimentConfig, target: TargetModel, potential, seed_points: np.ndarray) -> np.ndarray:
    """States of a short unbiased run, used as external seed points"""
    spec = config.direct.sampler if config.direct and config.direct.sampler else config.sampler
    steps = config.schedule.pilot_steps
    spec = spec.model_copy(update={"steps": spec.burn_in + steps, "thin": 1})
    rng = np.random.default_rng(stratum_seed(config.seed, 0, replicate=10**6))
    starts = pick_start(seed_points, StratumDensity(target, None, None), rng, spec.n_starts)
    traj = direct_chain(spec, target, starts, rng.integers(2**32), potential, config.target.beta)
    logger.info(f"Pilot run: {len(traj)} seed points")
    return traj.states


def build_setup(config: ExperimentConfig) -> ExperimentSetup:
    """Build target, bias family, observable, schedule and reference value"""
    target, potential, data = _build_target(config)
    bias = config.build_bias()
    g = config.observable.build()
    if config.schedule.seed_points is not None:
        seed_points = np.asarray(config.schedule.seed_points, dtype=float).reshape(-1, target.dim)
    else:
        seed_points = _default_seed_points(config, target, bias)
    if config.schedule.pilot_steps and config.sampler.kind != "iid":
        seed_points = _pilot_points(config, target, potential, seed_points)
    anchor = config.schedule.anchor
    if anchor is None:
        weight = bias.evaluate_many(seed_points, strict=False).sum(axis=0)
        anchor = int(np.argmax(weight))
    elif anchor >= bias.n_strata:
        raise ConfigError(f"anchor {anchor} outside 0..{bias.n_strata - 1}", ("schedule", "anchor"))
    schedule = build_schedule(bias, anchor, seed_points, target)
    cv, columns = _combined_cv(config.marginals)
    return ExperimentSetup(
        config=config, target=target, bias=bias, g=g, potential=potential, schedule=schedule,
        seed_points=seed_points, cv=cv, cv_columns=columns,
        reference=_reference(config, potential, g), data=data,
    )


# ============= Replicates =============
@dataclass
class ReplicateOutcome:
    report: ReplicateReport
    run: StratifiedRun
    variance: Optional[VarianceReport]
    marginals: Dict[str, MarginalReport]


def _relative(value: Optional[float], reference: Optional[float]) -> Optional[float]:
    if value is None or reference is None or reference == 0:
        return None
    return value / reference - 1.0


def run_replicate(setup: ExperimentSetup, replicate: int) -> ReplicateOutcome:
    """Sample every scheduled stratum, then estimate, analyze errors and marginals"""
    config = setup.config
    srun = run_stratified(
        setup.target, setup.bias, setup.schedule, config.sampler, setup.seed_points,
        g=setup.g, cv=setup.cv, base_seed=config.seed, replicate=replicate,
        potential=setup.potential, beta=config.target.beta, max_workers=setup.workers,
    )
    res = srun.result

    variance = None
    if config.errors.enabled:
        variance = emus_error_report(
            res.stats, res.weights, res.overlap,
            bound_use=config.errors.bound_use, bound_scale=config.errors.bound_scale,
            max_workers=setup.workers,
        )

    it_est, iterations, converged = None, None, None
    if config.iterative:
        try:
            zv, iterations = iterative_emus(res.stats)
            it_est, converged = emus_estimate(res.stats, zv), True
        except EmusError as e:
            # optional refinement; the plain EMUS estimate stands
            logger.warning(f"replicate {replicate}: iterative EMUS failed: {e}")
            iterations, converged = getattr(e, "iterations", None), False

    marginals = {}
    for spec in config.marginals:
        cols = setup.cv_columns[spec.name]
        stats = [dataclasses.replace(s, cv_values=s.cv_values.reshape(s.N, -1)[:, cols]) for s in res.stats]
        marginals[spec.name] = estimate_marginal(
            stats, res.weights, spec.grid(), F=res.overlap if config.errors.enabled else None, bias=setup.bias,
        )

    acceptance = np.array(list(srun.acceptance.values()))
    report = ReplicateReport(
        replicate=replicate,
        seed=config.seed,
        n_strata=setup.bias.n_strata,
        n_sampled=len(srun.trajectories),
        kept=[int(i) for i in res.kept],
        dropped=[int(i) for i in res.dropped],
        skipped=srun.skipped,
        n_total=int(sum(s.N for s in res.stats)),
        estimate=res.estimate,
        reference=setup.reference,
        relative_error=_relative(res.estimate, setup.reference),
        std_error=variance.std_error if variance else None,
        relative_std_error=variance.relative_std_error if variance else None,
        sigma2_us=variance.sigma2_us if variance else None,
        bound=variance.bound if variance else None,
        iterative_estimate=it_est,
        iterations=iterations,
        iterative_converged=converged,
        acceptance_mean=float(acceptance.mean()),
        acceptance_min=float(acceptance.min()),
        overlap_diagonal=np.diag(res.overlap.F).tolist(),
        marginal_integrals={name: m.integral() for name, m in marginals.items()},
        unreliable_strata=[int(res.kept[i]) for i in variance.unreliable_strata] if variance else [],
    )
    logger.info(f"replicate {replicate}: estimate {res.estimate:.6g} over {res.kept.size} strata")
    return ReplicateOutcome(report, srun, variance, marginals)


def aggregate(values: List[float], n_total: Optional[int] = None, reference: Optional[float] = None) -> Aggregate:
    """Mean, spread and N * var over replicate estimates"""
    est = np.asarray(values, dtype=float)
    agg = Aggregate(n=est.size, mean=float(est.mean()))
    if est.size >= 2:
        agg.std = float(est.std(ddof=1))
        if n_total:
            agg.n_var = replicate_variance(est, n_total)
    if reference:
        rel = np.abs(est / reference - 1.0)
        agg.mean_relative_error = float(rel.mean())
        agg.within_20pct = float(np.mean(rel <= 0.2))
    return agg


# ============= Artifacts =============
@contextmanager
def _file_logging(run_dir: Path):
    """Mirror log records into <run dir>/logs/run.log"""
    log_dir = run_dir / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


def write_artifacts(run_dir: Path, setup: ExperimentSetup, outcome: ReplicateOutcome) -> None:
    """Reports, matrices and marginal surfaces of one replicate"""
    res = outcome.run.result
    matrices = run_dir / "matrices"
    matrices.mkdir(parents=True, exist_ok=True)
    (run_dir / "estimate_report.json").write_text(res.report.model_dump_json(indent=2))

    F = res.overlap
    rows, cols = np.nonzero(F.F)
    pd.DataFrame({"row": F.strata[rows], "col": F.strata[cols], "value": F.F[rows, cols]}).to_csv(
        matrices / "overlap.csv", index=False
    )
    pd.DataFrame({"stratum": res.weights.strata, "z": res.weights.z}).to_csv(matrices / "weights.csv", index=False)
    if outcome.variance is not None:
        (run_dir / "variance_report.json").write_text(outcome.variance.model_dump_json(indent=2))
        if F.L <= MAX_DENSE_EXPORT:
            G = group_inverse(F, res.weights.z).A_sharp
            pd.DataFrame(G, index=F.strata, columns=F.strata).to_csv(matrices / "group_inverse.csv")
        else:
            logger.info(f"Skipping dense group inverse export for {F.L} strata")
        if outcome.variance.hitting_probs is not None:
            pd.DataFrame(outcome.variance.hitting_probs, index=F.strata, columns=F.strata).to_csv(
                matrices / "hitting_probabilities.csv"
            )
    for name, report in outcome.marginals.items():
        report.save(run_dir / "marginals", name)
    if setup.config.save_trajectories:
        for i, traj in sorted(outcome.run.trajectories.items()):
            save_trajectory(traj, run_dir / "trajectories", f"stratum_{i:05d}")
    logger.info(f"Artifacts written to {run_dir}")


def _summary_config(config: ExperimentConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json", exclude={"output_dir"})


def _summary_extras(setup: ExperimentSetup) -> Dict[str, Any]:
    if setup.data is None:
        return {}
    m = setup.config.target.mixture
    check = unboundedness_check(setup.data, m.K, m.g, m.alpha)
    unbounded = None if check else {"datum": check.datum, "frequency": check.frequency, "threshold": check.threshold}
    return {"data": setup.data.validation_report(), "unbounded": unbounded}


# ============= Ledger =============
@contextmanager
def _ledger_run(db: Optional[Database], config: ExperimentConfig, command: str):
    """Yield a ledger run id (None without a ledger); mark it failed on error"""
    if db is None:
        yield None
        return
    with db.session() as session:
        row = crud.create_run(
            session, name=config.name, kind=config.experiment, output_dir=str(config.run_dir),
            config=_summary_config(config), command=command,
        )
        run_id = row.id
    try:
        yield run_id
    except Exception as e:
        with db.session() as session:
            crud.finish_run(session, run_id, status="failed", error_message=str(e))
        raise
    with db.session() as session:
        crud.finish_run(session, run_id, status="completed")


def _record_replicate(db: Optional[Database], run_id: Optional[int], report: ReplicateReport) -> None:
    if db is None or run_id is None:
        return
    with db.session() as session:
        crud.add_replicate(
            session, run_id, report.replicate, report.seed,
            estimate=report.estimate, std_error=report.std_error, relative_error=report.relative_error,
            summary=report.model_dump(mode="json", exclude={"kept", "overlap_diagonal"}),
        )


# ============= Commands =============
def _replicates(setup: ExperimentSetup, run_dir: Path, db, run_id) -> List[ReplicateOutcome]:
    outcomes = []
    rep_dir = run_dir / "replicates"
    rep_dir.mkdir(parents=True, exist_ok=True)
    for r in range(setup.config.replicates):
        outcome = run_replicate(setup, r)
        (rep_dir / f"replicate_{r:03d}.json").write_text(outcome.report.model_dump_json(indent=2))
        _record_replicate(db, run_id, outcome.report)
        if r == 0:
            write_artifacts(run_dir, setup, outcome)
        else:
            # keep only the report of later replicates
            outcome = ReplicateOutcome(outcome.report, outcome.run, None, {})
        outcomes.append(outcome)
    return outcomes


def _write_summary(run_dir: Path, summary: RunSummary) -> None:
    (run_dir / "summary.json").write_text(summary.model_dump_json(indent=2))
    logger.info(f"Summary written to {run_dir / 'summary.json'}")


def run(config: ExperimentConfig, db: Optional[Database] = None) -> RunSummary:
    """Run an experiment with all its replicates and write the run directory"""
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    with _file_logging(run_dir), _ledger_run(db, config, "run") as run_id:
        logger.info(f"Starting '{config.name}' ({config.experiment}), {config.replicates} replicate(s)")
        setup = build_setup(config)
        outcomes = _replicates(setup, run_dir, db, run_id)
        reports = [o.report for o in outcomes]
        summary = RunSummary(
            name=config.name,
            experiment=config.experiment,
            config=_summary_config(config),
            aggregate=aggregate([r.estimate for r in reports], reports[0].n_total, setup.reference),
            replicates=reports,
            **_summary_extras(setup),
        )
        _write_summary(run_dir, summary)
    return summary


def _direct_runs(setup: ExperimentSetup, spec: SamplerSpec, budget: int, replicate: int) -> List[Trajectory]:
    config = setup.config
    runs = config.direct.runs
    kept = max(1, budget // (runs * spec.n_starts))
    base = setup.bias.n_strata + 1

    def one(k: int) -> Trajectory:
        pick_seq, chain_seq = stratum_seed(config.seed, base + k, replicate).spawn(2)
        starts = None
        if spec.kind != "iid":
            density = StratumDensity(setup.target, None, None)
            starts = pick_start(setup.seed_points, density, np.random.default_rng(pick_seq), spec.n_starts)
        return direct_chain(spec, setup.target, starts, chain_seq, setup.potential, config.target.beta, kept)

    with ThreadPoolExecutor(max_workers=setup.workers) as pool:
        return list(pool.map(one, range(runs)))


def _better_bins(emus: MarginalReport, direct: MarginalReport) -> Tuple[int, int]:
    a, b = emus.error_array(), direct.error_array()
    both = np.isfinite(a) & np.isfinite(b)
    return int(np.sum(a[both] < b[both])), int(np.sum(b[both] < a[both]))


def _comparison_frame(emus: MarginalReport, direct: MarginalReport) -> pd.DataFrame:
    frame = emus.to_frame().rename(columns={"density": "emus_density", "std_error": "emus_std_error", "count": "emus_count"})
    frame = frame.drop(columns=["empty"])
    frame["direct_density"] = direct.density_array()
    frame["direct_std_error"] = direct.error_array()
    frame["direct_count"] = direct.counts
    return frame


def compare_direct(config: ExperimentConfig, db: Optional[Database] = None) -> RunSummary:
    """Stratified run plus unstratified runs of the same total sample budget"""
    if config.direct is None:
        raise ConfigError("compare-direct needs a `direct` section", ("direct",))
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    with _file_logging(run_dir), _ledger_run(db, config, "compare-direct") as run_id:
        setup = build_setup(config)
        spec = config.direct.sampler or config.sampler
        outcomes = _replicates(setup, run_dir, db, run_id)
        comparisons = []
        for outcome in outcomes:
            rep = outcome.report
            budget = rep.n_total
            trajs = _direct_runs(setup, spec, budget, rep.replicate)
            direct = [direct_estimate(t, setup.g) for t in trajs]
            d_est = float(np.mean([d.estimate for d in direct]))
            d_se = float(np.sqrt(np.sum([d.std_error ** 2 for d in direct])) / len(direct))
            emus_better, direct_better = {}, {}
            if rep.replicate == 0:
                for m in config.marginals:
                    dm = direct_marginal(trajs, m.grid(), m.cv_function())
                    dm.save(run_dir / "marginals", f"{m.name}_direct")
                    _comparison_frame(outcome.marginals[m.name], dm).to_csv(
                        run_dir / "marginals" / f"{m.name}_comparison.csv", index=False
                    )
                    emus_better[m.name], direct_better[m.name] = _better_bins(outcome.marginals[m.name], dm)
            comparisons.append(ComparisonReport(
                replicate=rep.replicate,
                budget=sum(len(t) for t in trajs),
                emus_estimate=rep.estimate,
                emus_std_error=rep.std_error,
                direct_estimate=d_est,
                direct_std_error=d_se,
                direct_zero_hits=d_est == 0.0,
                reference=setup.reference,
                emus_relative_error=rep.relative_error,
                direct_relative_error=_relative(d_est, setup.reference),
                emus_better_bins=emus_better,
                direct_better_bins=direct_better,
            ))
            logger.info(f"replicate {rep.replicate}: EMUS {rep.estimate:.6g} vs direct {d_est:.6g} at budget {budget}")

        reports = [o.report for o in outcomes]
        summary = RunSummary(
            name=config.name,
            experiment=config.experiment,
            command="compare-direct",
            config=_summary_config(config),
            aggregate=aggregate([r.estimate for r in reports], reports[0].n_total, setup.reference),
            replicates=reports,
            comparisons=comparisons,
            direct_aggregate=aggregate([c.direct_estimate for c in comparisons], comparisons[0].budget, setup.reference),
            **_summary_extras(setup),
        )
        (run_dir / "comparison.json").write_text(
            "[\n" + ",\n".join(c.model_dump_json(indent=2) for c in comparisons) + "\n]"
        )
        _write_summary(run_dir, summary)
    return summary
