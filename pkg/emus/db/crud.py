from sqlmodel import Session, select
from typing import Optional, List
from datetime import datetime
import json
import logging

from emus.db.schema import ExperimentRun, ReplicateSummary

logger = logging.getLogger(__name__)


# ============= ExperimentRun CRUD =============
def create_run(
    session: Session,
    name: str,
    kind: str,
    output_dir: str,
    config: dict = None,
    command: str = "run",
) -> ExperimentRun:
    """Record a new run in the ledger"""
    run = ExperimentRun(
        name=name,
        kind=kind,
        command=command,
        output_dir=str(output_dir),
        config_json=json.dumps(config or {}, default=str),
    )
    session.add(run)
    session.commit()
    session.refresh(run)
    logger.info(f"Created ledger run: {run.name} (ID: {run.id})")
    return run


def get_run(session: Session, run_id: int) -> Optional[ExperimentRun]:
    return session.get(ExperimentRun, run_id)


def list_runs(session: Session, kind: Optional[str] = None, limit: Optional[int] = None) -> List[ExperimentRun]:
    """List runs, newest first"""
    statement = select(ExperimentRun)
    if kind:
        statement = statement.where(ExperimentRun.kind == kind)
    statement = statement.order_by(ExperimentRun.started_at.desc(), ExperimentRun.id.desc())
    if limit:
        statement = statement.limit(limit)
    return list(session.exec(statement).all())


def finish_run(
    session: Session,
    run_id: int,
    status: str = "completed",
    error_message: Optional[str] = None,
) -> Optional[ExperimentRun]:
    """Mark a run completed or failed"""
    run = get_run(session, run_id)
    if not run:
        return None

    run.status = status
    run.error_message = error_message
    run.finished_at = datetime.utcnow()
    session.add(run)
    session.commit()
    session.refresh(run)
    if status == "failed":
        logger.warning(f"Run {run_id} failed: {error_message}")
    return run


# ============= ReplicateSummary CRUD =============
def add_replicate(
    session: Session,
    run_id: int,
    replicate: int,
    seed: int,
    estimate: Optional[float] = None,
    std_error: Optional[float] = None,
    relative_error: Optional[float] = None,
    summary: dict = None,
) -> ReplicateSummary:
    """Store the summary of one replicate"""
    row = ReplicateSummary(
        run_id=run_id,
        replicate=replicate,
        seed=seed,
        estimate=estimate,
        std_error=std_error,
        relative_error=relative_error,
        summary_json=json.dumps(summary or {}, default=str),
    )
    session.add(row)
    session.commit()
    session.refresh(row)
    return row


def get_replicates(session: Session, run_id: int) -> List[ReplicateSummary]:
    statement = select(ReplicateSummary).where(
        ReplicateSummary.run_id == run_id
    ).order_by(ReplicateSummary.replicate)
    return list(session.exec(statement).all())


def get_run_stats(session: Session, run_id: int) -> dict:
    """Aggregate replicate estimates of a run"""
    rows = get_replicates(session, run_id)
    estimates = [r.estimate for r in rows if r.estimate is not None]
    stats = {
        "run_id": run_id,
        "replicates": len(rows),
        "with_estimate": len(estimates),
    }
    if estimates:
        mean = sum(estimates) / len(estimates)
        stats["mean_estimate"] = mean
        if len(estimates) > 1:
            var = sum((e - mean) ** 2 for e in estimates) / (len(estimates) - 1)
            stats["std_estimate"] = var ** 0.5
    return stats
