import uuid
from datetime import datetime
from typing import Any

from sqlalchemy import ForeignKey, String, Integer, DateTime, JSON
from sqlalchemy.orm import Mapped, mapped_column, relationship

from api.db.database import Base


def _uuid() -> str:
    return str(uuid.uuid4())


class Run(Base):
    """One scenario execution with a fixed seed."""

    __tablename__ = "runs"

    id: Mapped[str] = mapped_column(String(36), primary_key=True, default=_uuid)
    scenario: Mapped[str] = mapped_column(String(255), nullable=False, index=True)
    seed: Mapped[int] = mapped_column(Integer, nullable=False, index=True)
    status: Mapped[str] = mapped_column(String(20), nullable=False, default="running", index=True)
    summary: Mapped[dict[str, Any] | None] = mapped_column(JSON)
    record_count: Mapped[int] = mapped_column(Integer, nullable=False, default=0)
    started_at: Mapped[datetime] = mapped_column(DateTime, nullable=False, default=datetime.utcnow)
    completed_at: Mapped[datetime | None] = mapped_column(DateTime)
    meta_data: Mapped[dict[str, Any] | None] = mapped_column(JSON, name="metadata")

    metrics: Mapped[list["MetricRecord"]] = relationship(
        "MetricRecord", back_populates="run", cascade="all, delete-orphan"
    )


class MetricRecord(Base):
    """One `{time, node, metric, value}` record from a run's metric stream."""

    __tablename__ = "metric_records"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[str] = mapped_column(String(36), ForeignKey("runs.id", ondelete="CASCADE"), nullable=False, index=True)
    seq: Mapped[int] = mapped_column(Integer, nullable=False)
    time: Mapped[int] = mapped_column(Integer, nullable=False, index=True)
    node: Mapped[int | None] = mapped_column(Integer, index=True)
    metric: Mapped[str] = mapped_column(String(100), nullable=False, index=True)
    value: Mapped[Any] = mapped_column(JSON)

    run: Mapped["Run"] = relationship("Run", back_populates="metrics")
