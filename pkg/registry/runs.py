"""Registry operations used by the training command."""

from __future__ import annotations

import logging
from typing import Optional

from sqlalchemy import select
from sqlalchemy.orm import Session

from .models import CheckpointRecord, Run, RunStatus

logger = logging.getLogger(__name__)


def get_run(session: Session, run_id: str) -> Optional[Run]:
    return session.execute(select(Run).where(Run.run_id == run_id)).scalar_one_or_none()


def register_run(
    session: Session,
    run_id: str,
    config_text: str,
    model_name: str,
    seed: int,
    total_steps: int,
) -> Run:
    """Create the run row, or reopen it when a run with this id resumes."""
    run = get_run(session, run_id)
    if run is None:
        run = Run(
            run_id=run_id,
            config_text=config_text,
            model_name=model_name,
            seed=seed,
            total_steps=total_steps,
        )
        session.add(run)
        logger.info("registered run %s (%s)", run_id, model_name)
    else:
        run.status = RunStatus.RUNNING
        run.error = None
        logger.info("reopened run %s at step %d", run_id, run.last_step)
    session.commit()
    return run


def record_progress(session: Session, run: Run, step: int, loss: float) -> None:
    run.last_step = step
    run.last_loss = loss
    session.commit()


def record_checkpoint(session: Session, run: Run, step: int, path: str, loss: Optional[float]) -> CheckpointRecord:
    record = CheckpointRecord(run_pk=run.id, step=step, path=path, loss=loss)
    session.add(record)
    session.commit()
    return record


def finish_run(session: Session, run: Run, error: Optional[str] = None) -> None:
    run.status = RunStatus.FAILED if error else RunStatus.COMPLETED
    run.error = error
    session.commit()


def latest_checkpoint(session: Session, run_id: str) -> Optional[CheckpointRecord]:
    run = get_run(session, run_id)
    if run is None or not run.checkpoints:
        return None
    return run.checkpoints[-1]
