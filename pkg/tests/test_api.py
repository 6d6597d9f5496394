import asyncio
import json

import httpx
import pytest
from fastapi.testclient import TestClient
from sqlalchemy.pool import NullPool

from api.db.database import build_engine, close_db, get_db, init_db, session_factory
from api.main import app
from hydrasim.client import ResultsClient
from hydrasim.config import MAX_METRICS_PER_BATCH, HydraSettings
from hydrasim.models import MetricRecord


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setenv("HYDRA_DATABASE_URL", f"sqlite+aiosqlite:///{tmp_path / 'results.db'}")
    engine = build_engine(HydraSettings(), poolclass=NullPool)
    sessions = session_factory(engine)
    asyncio.run(init_db(engine))

    async def override():
        async with sessions() as session:
            yield session

    app.dependency_overrides[get_db] = override
    yield TestClient(app)
    app.dependency_overrides.clear()
    asyncio.run(close_db(engine))


def test_database_settings_reach_the_engine(monkeypatch):
    monkeypatch.delenv("HYDRA_DATABASE_URL", raising=False)
    monkeypatch.setenv("DATABASE_URL", "sqlite+aiosqlite:///elsewhere.db")
    monkeypatch.setenv("HYDRA_DATABASE_ECHO", "true")
    settings = HydraSettings()
    assert settings.database_url == "sqlite+aiosqlite:///elsewhere.db"
    engine = build_engine(settings)
    assert engine.echo is True
    assert engine.url.database == "elsewhere.db"
    asyncio.run(close_db(engine))


def records(*rows: tuple[int, int | None, str, object]) -> list[dict]:
    return [{"time": t, "node": n, "metric": m, "value": v} for t, n, m, v in rows]


def start(client: TestClient, scenario: str = "chaos", seed: int = 7) -> str:
    resp = client.post("/v1/runs", json={"scenario": scenario, "seed": seed, "metadata": {"peers": 8}})
    assert resp.status_code == 201
    return resp.json()["run_id"]


def test_health(client):
    assert client.get("/health").json() == {"status": "ok"}


def test_run_lifecycle(client):
    run_id = start(client)
    batch = records(
        (10, 3, "raft.leader_elected", {"group": "g", "term": 1}),
        (250, 1, "train.loss", {"job": "toy", "step": 0, "loss": 0.7}),
    )
    resp = client.post(f"/v1/runs/{run_id}/metrics", json={"records": batch})
    assert resp.status_code == 201 and resp.json() == {"accepted": 2, "total": 2}
    resp = client.post(f"/v1/runs/{run_id}/metrics", json={"records": records((300, None, "dataset_lost", 5))})
    assert resp.json()["total"] == 3

    resp = client.patch(f"/v1/runs/{run_id}", json={"status": "failed", "summary": {"ok": False}})
    assert resp.status_code == 200 and resp.json()["status"] == "failed"

    detail = client.get(f"/v1/runs/{run_id}").json()
    assert detail["record_count"] == 3
    assert detail["summary"] == {"ok": False}
    assert detail["metadata"] == {"peers": 8}
    assert detail["metrics"] == {"dataset_lost": 1, "raft.leader_elected": 1, "train.loss": 1}


def test_completed_runs_take_no_more_metrics(client):
    run_id = start(client)
    client.patch(f"/v1/runs/{run_id}", json={"status": "completed"})
    resp = client.post(f"/v1/runs/{run_id}/metrics", json={"records": records((1, 1, "x", 1))})
    assert resp.status_code == 409


def test_unknown_run(client):
    assert client.get("/v1/runs/nope").status_code == 404
    assert client.post("/v1/runs/nope/metrics", json={"records": []}).status_code == 404


def test_oversized_batch_is_refused(client):
    run_id = start(client)
    batch = records(*[(i, 1, "x", i) for i in range(MAX_METRICS_PER_BATCH + 1)])
    assert client.post(f"/v1/runs/{run_id}/metrics", json={"records": batch}).status_code == 413


def test_list_and_filter_runs(client):
    for seed in range(3):
        start(client, "chaos", seed)
    start(client, "minimal", 0)
    listing = client.get("/v1/runs", params={"scenario": "chaos", "page_size": 2}).json()
    assert listing["total"] == 3 and len(listing["runs"]) == 2
    assert client.get("/v1/runs", params={"seed": 0}).json()["total"] == 2


def test_query_metrics_across_runs(client):
    first, second = start(client, seed=1), start(client, seed=2)
    for run_id in (first, second):
        batch = records((5, 1, "raft.leader_elected", {"group": "g"}), (9, 2, "train.loss", {"loss": 1.0}))
        client.post(f"/v1/runs/{run_id}/metrics", json={"records": batch})
    start(client, "other", 1)

    found = client.post("/v1/query/metrics", json={"scenario": "chaos", "metric": "raft.leader_elected"}).json()
    assert found["count"] == 2
    assert {r["run_id"] for r in found["records"]} == {first, second}

    by_node = client.post("/v1/query/metrics", json={"run_id": first, "node": 2, "since": 6}).json()
    assert [r["metric"] for r in by_node["records"]] == ["train.loss"]


def test_results_client_survives_a_dead_service():
    def refuse(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("refused", request=request)

    with ResultsClient("http://results.invalid", transport=httpx.MockTransport(refuse)) as results:
        assert results.start_run("chaos", 1) is None
        assert results.upload_metrics("r", [MetricRecord(time=0, node=1, metric="m", value=1)]) is None
        assert results.complete_run("r") is None


def test_results_client_batches_uploads():
    seen: list[int] = []

    def service(request: httpx.Request) -> httpx.Response:
        count = len(json.loads(request.content)["records"])
        seen.append(count)
        return httpx.Response(201, json={"accepted": count, "total": sum(seen)})

    stream = [MetricRecord(time=i, node=0, metric="m", value=i) for i in range(MAX_METRICS_PER_BATCH + 5)]
    with ResultsClient("http://results.test", transport=httpx.MockTransport(service)) as results:
        assert results.upload_metrics("r", stream) == len(stream)
    assert seen == [MAX_METRICS_PER_BATCH, 5]
