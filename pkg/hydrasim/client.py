import logging
from collections.abc import Iterable
from types import TracebackType
from typing import Any
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import httpx

from hydrasim.config import MAX_METRICS_PER_BATCH, HydraSettings
from hydrasim.models import MetricRecord

log = logging.getLogger(__name__)


class ResultsClient:
    """
    Publishes finished scenario runs to the results service.

    Every call swallows transport and HTTP errors: they are logged and the
    method returns None, so a dead results service never fails a run.

    Basic usage:
        with ResultsClient() as client:
            run_id = client.start_run("chaos", seed=7)
            client.upload_metrics(run_id, result.metrics.records)
            client.complete_run(run_id, summary={"ok": True})
    """

    def __init__(
        self,
        api_url: str | None = None,
        enabled: bool = True,
        timeout: float | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        settings = HydraSettings()
        self.api_url: str = api_url or settings.api_url
        self.enabled = enabled
        self.timeout = timeout if timeout is not None else settings.api_timeout
        self._client = httpx.Client(base_url=self.api_url, timeout=self.timeout, transport=transport)

    def start_run(self, scenario: str, seed: int, metadata: dict[str, Any] | None = None) -> str | None:
        if not self.enabled:
            return None
        try:
            payload: dict[str, Any] = {"scenario": scenario, "seed": seed}
            if metadata:
                payload["metadata"] = metadata
            resp = self._client.post("/v1/runs", json=payload)
            resp.raise_for_status()
            return resp.json().get("run_id")
        except Exception as e:
            log.warning(f"start_run failed: {e}")
            return None

    def upload_metrics(self, run_id: str | None, records: Iterable[MetricRecord]) -> int | None:
        """Send records in batches; returns how many the service accepted."""
        if not self.enabled or not run_id:
            return None
        accepted = 0
        batch: list[dict[str, Any]] = []
        try:
            for record in records:
                batch.append(record.model_dump(mode="json"))
                if len(batch) == MAX_METRICS_PER_BATCH:
                    accepted += self._post_batch(run_id, batch)
                    batch = []
            if batch:
                accepted += self._post_batch(run_id, batch)
            return accepted
        except Exception as e:
            log.warning(f"upload_metrics failed after {accepted} records: {e}")
            return None

    def _post_batch(self, run_id: str, batch: list[dict[str, Any]]) -> int:
        resp = self._client.post(f"/v1/runs/{run_id}/metrics", json={"records": batch})
        resp.raise_for_status()
        return int(resp.json().get("accepted", 0))

    def complete_run(
        self, run_id: str | None, summary: dict[str, Any] | None = None, status: str = "completed"
    ) -> dict[str, Any] | None:
        if not self.enabled or not run_id:
            return None
        try:
            resp = self._client.patch(f"/v1/runs/{run_id}", json={"status": status, "summary": summary})
            resp.raise_for_status()
            return resp.json()
        except Exception as e:
            log.warning(f"complete_run failed: {e}")
            return None

    # queries

    def get_run(self, run_id: str) -> dict[str, Any] | None:
        try:
            resp = self._client.get(f"/v1/runs/{run_id}")
            resp.raise_for_status()
            return resp.json()
        except Exception as e:
            log.warning(f"get_run failed: {e}")
            return None

    def query_runs(
        self, scenario: str | None = None, status: str | None = None, page: int = 1, page_size: int = 20
    ) -> dict[str, Any] | None:
        try:
            params: dict[str, str | int] = {"page": page, "page_size": page_size}
            if scenario:
                params["scenario"] = scenario
            if status:
                params["status"] = status
            resp = self._client.get("/v1/runs", params=params)
            resp.raise_for_status()
            return resp.json()
        except Exception as e:
            log.warning(f"query_runs failed: {e}")
            return None

    def query_metrics(
        self,
        run_id: str | None = None,
        metric: str | None = None,
        node: int | None = None,
        since: int | None = None,
        until: int | None = None,
        limit: int = 1000,
    ) -> dict[str, Any] | None:
        try:
            data = {
                k: v
                for k, v in {
                    "run_id": run_id,
                    "metric": metric,
                    "node": node,
                    "since": since,
                    "until": until,
                    "limit": limit,
                }.items()
                if v is not None
            }
            resp = self._client.post("/v1/query/metrics", json=data)
            resp.raise_for_status()
            return resp.json()
        except Exception as e:
            log.warning(f"query_metrics failed: {e}")
            return None

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> Self:
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_val: BaseException | None,
        exc_tb: TracebackType | None,
    ) -> None:
        self.close()
