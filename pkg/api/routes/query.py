from datetime import datetime
from typing import Any

from fastapi import APIRouter, Depends, HTTPException, Query
from pydantic import BaseModel, Field
from sqlalchemy import select, and_, func
from sqlalchemy.ext.asyncio import AsyncSession

from api.db.database import get_db
from api.db.models import MetricRecord, Run

router = APIRouter(prefix="/v1", tags=["query"])


class RunSummary(BaseModel):
    id: str
    scenario: str
    seed: int
    status: str
    record_count: int
    started_at: datetime
    completed_at: datetime | None


class RunListResponse(BaseModel):
    runs: list[RunSummary]
    total: int
    page: int
    page_size: int


class RunDetailResponse(RunSummary):
    summary: dict[str, Any] | None
    metadata: dict[str, Any] | None
    metrics: dict[str, int]


class MetricQueryRequest(BaseModel):
    run_id: str | None = None
    scenario: str | None = None
    metric: str | None = None
    node: int | None = None
    since: int | None = None
    until: int | None = None
    limit: int = Field(default=1000, ge=1, le=10_000)
    offset: int = Field(default=0, ge=0)


class MetricOut(BaseModel):
    run_id: str
    seq: int
    time: int
    node: int | None
    metric: str
    value: Any


class MetricQueryResponse(BaseModel):
    records: list[MetricOut]
    count: int


def _summary(r: Run) -> RunSummary:
    return RunSummary(
        id=r.id,
        scenario=r.scenario,
        seed=r.seed,
        status=r.status,
        record_count=r.record_count,
        started_at=r.started_at,
        completed_at=r.completed_at,
    )


@router.get("/runs", response_model=RunListResponse)
async def list_runs(
    scenario: str | None = None,
    status: str | None = None,
    seed: int | None = None,
    page: int = Query(1, ge=1),
    page_size: int = Query(20, ge=1, le=100),
    db: AsyncSession = Depends(get_db),
) -> RunListResponse:
    conds = []
    if scenario:
        conds.append(Run.scenario == scenario)
    if status:
        conds.append(Run.status == status)
    if seed is not None:
        conds.append(Run.seed == seed)

    query = select(Run)
    count_query = select(func.count()).select_from(Run)
    if conds:
        query = query.where(and_(*conds))
        count_query = count_query.where(and_(*conds))
    total = await db.scalar(count_query) or 0

    offset = (page - 1) * page_size
    result = await db.execute(query.order_by(Run.started_at.desc(), Run.id).offset(offset).limit(page_size))
    return RunListResponse(
        runs=[_summary(r) for r in result.scalars().all()], total=total, page=page, page_size=page_size
    )


@router.get("/runs/{run_id}", response_model=RunDetailResponse)
async def get_run(run_id: str, db: AsyncSession = Depends(get_db)) -> RunDetailResponse:
    run = (await db.execute(select(Run).where(Run.id == run_id))).scalar_one_or_none()
    if not run:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")

    counts = await db.execute(
        select(MetricRecord.metric, func.count())
        .where(MetricRecord.run_id == run_id)
        .group_by(MetricRecord.metric)
        .order_by(MetricRecord.metric)
    )
    return RunDetailResponse(
        **_summary(run).model_dump(),
        summary=run.summary,
        metadata=run.meta_data,
        metrics={metric: n for metric, n in counts.all()},
    )


@router.post("/query/metrics", response_model=MetricQueryResponse)
async def query_metrics(request: MetricQueryRequest, db: AsyncSession = Depends(get_db)) -> MetricQueryResponse:
    """Filter metric records across runs, e.g. every `raft.leader_elected` of one scenario."""
    query = select(MetricRecord).join(Run)

    conds = []
    if request.run_id:
        conds.append(MetricRecord.run_id == request.run_id)
    if request.scenario:
        conds.append(Run.scenario == request.scenario)
    if request.metric:
        conds.append(MetricRecord.metric == request.metric)
    if request.node is not None:
        conds.append(MetricRecord.node == request.node)
    if request.since is not None:
        conds.append(MetricRecord.time >= request.since)
    if request.until is not None:
        conds.append(MetricRecord.time <= request.until)
    if conds:
        query = query.where(and_(*conds))

    query = query.order_by(MetricRecord.run_id, MetricRecord.seq).offset(request.offset).limit(request.limit)
    records = (await db.execute(query)).scalars().all()
    return MetricQueryResponse(
        records=[
            MetricOut(run_id=m.run_id, seq=m.seq, time=m.time, node=m.node, metric=m.metric, value=m.value)
            for m in records
        ],
        count=len(records),
    )
