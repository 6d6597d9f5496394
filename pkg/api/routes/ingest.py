from datetime import datetime
from typing import Any, Literal

from fastapi import APIRouter, Depends, HTTPException, status
from pydantic import BaseModel, Field
from sqlalchemy import select
from sqlalchemy.ext.asyncio import AsyncSession

from api.db.database import get_db
from api.db.models import MetricRecord, Run
from hydrasim.config import MAX_METRICS_PER_BATCH
from hydrasim.models import MetricRecord as MetricInput

router = APIRouter(prefix="/v1", tags=["ingest"])


class RunInput(BaseModel):
    scenario: str = Field(min_length=1)
    seed: int
    metadata: dict[str, Any] | None = None


class RunComplete(BaseModel):
    status: Literal["completed", "failed"] = "completed"
    summary: dict[str, Any] | None = None


class MetricBatch(BaseModel):
    records: list[MetricInput]


class CreateRunResponse(BaseModel):
    run_id: str


class MetricBatchResponse(BaseModel):
    accepted: int
    total: int


class CompleteRunResponse(BaseModel):
    run_id: str
    status: str
    completed_at: datetime


async def _get_run(db: AsyncSession, run_id: str) -> Run:
    run = (await db.execute(select(Run).where(Run.id == run_id))).scalar_one_or_none()
    if not run:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return run


@router.post("/runs", status_code=status.HTTP_201_CREATED, response_model=CreateRunResponse)
async def create_run(run_input: RunInput, db: AsyncSession = Depends(get_db)) -> CreateRunResponse:
    run = Run(
        scenario=run_input.scenario,
        seed=run_input.seed,
        meta_data=run_input.metadata,
        status="running",
        started_at=datetime.utcnow(),
    )
    db.add(run)
    await db.commit()
    await db.refresh(run)
    return CreateRunResponse(run_id=run.id)


@router.post("/runs/{run_id}/metrics", status_code=status.HTTP_201_CREATED, response_model=MetricBatchResponse)
async def append_metrics(run_id: str, batch: MetricBatch, db: AsyncSession = Depends(get_db)) -> MetricBatchResponse:
    if len(batch.records) > MAX_METRICS_PER_BATCH:
        raise HTTPException(
            status_code=413,
            detail=f"Too many records: {len(batch.records)} exceeds maximum of {MAX_METRICS_PER_BATCH}",
        )
    run = await _get_run(db, run_id)
    if run.status != "running":
        raise HTTPException(status_code=409, detail=f"Run {run_id} is already {run.status}")

    for offset, record in enumerate(batch.records):
        db.add(
            MetricRecord(
                run_id=run_id,
                seq=run.record_count + offset,
                time=record.time,
                node=record.node,
                metric=record.metric,
                value=record.value,
            )
        )
    run.record_count += len(batch.records)
    await db.commit()
    return MetricBatchResponse(accepted=len(batch.records), total=run.record_count)


@router.patch("/runs/{run_id}", response_model=CompleteRunResponse)
async def complete_run(run_id: str, run_complete: RunComplete, db: AsyncSession = Depends(get_db)) -> CompleteRunResponse:
    run = await _get_run(db, run_id)
    run.summary = run_complete.summary
    run.status = run_complete.status
    run.completed_at = datetime.utcnow()
    await db.commit()
    return CompleteRunResponse(run_id=run_id, status=run.status, completed_at=run.completed_at)
