"""SQLAlchemy ORM models for the run registry."""

from __future__ import annotations

import enum
from datetime import datetime, timezone
from typing import Optional, List

from sqlalchemy import (
    Column,
    DateTime,
    Enum,
    Float,
    ForeignKey,
    Index,
    Integer,
    String,
    Text,
)
from sqlalchemy.orm import relationship, Mapped

from .database import Base


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------


class RunStatus(str, enum.Enum):
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


class Run(Base):
    """One training run, keyed by the hash of its canonical config."""

    __tablename__ = "runs"

    id: Mapped[int] = Column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[str] = Column(String(12), nullable=False, unique=True)
    config_text: Mapped[str] = Column(Text, nullable=False)
    model_name: Mapped[str] = Column(String(60), nullable=False)
    seed: Mapped[int] = Column(Integer, nullable=False)
    status: Mapped[str] = Column(Enum(RunStatus), default=RunStatus.RUNNING, nullable=False)
    total_steps: Mapped[int] = Column(Integer, nullable=False)
    last_step: Mapped[int] = Column(Integer, default=0, nullable=False)
    last_loss: Mapped[Optional[float]] = Column(Float, nullable=True)
    error: Mapped[Optional[str]] = Column(Text, nullable=True)
    created_at: Mapped[datetime] = Column(DateTime, default=_utcnow, nullable=False)
    updated_at: Mapped[datetime] = Column(DateTime, default=_utcnow, onupdate=_utcnow, nullable=False)

    checkpoints: Mapped[List["CheckpointRecord"]] = relationship(
        "CheckpointRecord", back_populates="run", order_by="CheckpointRecord.step"
    )


class CheckpointRecord(Base):
    """A checkpoint file written by a run."""

    __tablename__ = "checkpoints"
    __table_args__ = (Index("ix_checkpoints_run_step", "run_pk", "step"),)

    id: Mapped[int] = Column(Integer, primary_key=True, autoincrement=True)
    run_pk: Mapped[int] = Column(Integer, ForeignKey("runs.id"), nullable=False)
    step: Mapped[int] = Column(Integer, nullable=False)
    path: Mapped[str] = Column(String(500), nullable=False)
    loss: Mapped[Optional[float]] = Column(Float, nullable=True)
    created_at: Mapped[datetime] = Column(DateTime, default=_utcnow, nullable=False)

    run: Mapped["Run"] = relationship("Run", back_populates="checkpoints")
