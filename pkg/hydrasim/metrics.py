"""
Metric streams and summary reports.

Every protocol emits `{time, node, metric, value}` records into a MetricsSink.
Streams are written as line-delimited JSON with sorted keys so that two runs
with the same seed produce byte-identical files.
"""

import json
import logging
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any

import pandas as pd

from hydrasim.models import MetricRecord

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.txt"


class MetricsSink:
    def __init__(self) -> None:
        self._records: list[MetricRecord] = []

    def emit(self, time: int, node: int | None, metric: str, value: Any) -> None:
        self._records.append(MetricRecord(time=time, node=node, metric=metric, value=value))

    @property
    def records(self) -> list[MetricRecord]:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[MetricRecord]:
        return iter(self._records)

    def select(self, metric: str) -> list[MetricRecord]:
        return [r for r in self._records if r.metric == metric]

    def count(self, metric: str) -> int:
        return sum(1 for r in self._records if r.metric == metric)

    def lines(self) -> Iterator[str]:
        for r in self._records:
            yield json.dumps(r.model_dump(), sort_keys=True, separators=(",", ":"))

    def write_jsonl(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")
        return path


def read_jsonl(path: Path) -> list[MetricRecord]:
    records: list[MetricRecord] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(MetricRecord.model_validate_json(line))
            except ValueError as e:
                log.warning(f"skipping malformed metric at {path}:{lineno}: {e}")
    return records


def _frame(records: Iterable[MetricRecord], metric: str) -> pd.DataFrame:
    rows = [r.model_dump() for r in records if r.metric == metric]
    return pd.DataFrame(rows, columns=["time", "node", "metric", "value"])


def _unpack(frame: pd.DataFrame, field: str, column: str) -> pd.DataFrame:
    """Spread `{job, step, <field>}` payloads into columns."""
    out = frame[["time"]].copy()
    values = frame["value"]
    out["job"] = values.map(lambda v: v.get("job") if isinstance(v, dict) else None)
    out["step"] = values.map(lambda v: v.get("step") if isinstance(v, dict) else None)
    out[column] = values.map(lambda v: v.get(field) if isinstance(v, dict) else v).astype(float)
    return out


def build_tables(records: list[MetricRecord]) -> dict[str, pd.DataFrame]:
    """Summary tables: loss curve, step latencies, elections, deferred chunks, balances."""
    tables: dict[str, pd.DataFrame] = {}

    loss = _unpack(_frame(records, "train.loss"), "loss", "loss")
    tables["loss_curve"] = loss[["time", "job", "step", "loss"]]

    steps = _unpack(_frame(records, "train.step_ms"), "ms", "step_ms")
    tables["step_latency"] = steps[["time", "job", "step", "step_ms"]]

    elections = _frame(records, "raft.leader_elected")
    if elections.empty:
        tables["elections"] = pd.DataFrame(columns=["group", "count"])
    else:
        groups = elections["value"].map(lambda v: v.get("group") if isinstance(v, dict) else v)
        tables["elections"] = (
            groups.value_counts().sort_index().rename_axis("group").reset_index(name="count")
        )

    deferred = _unpack(_frame(records, "train.deferred_chunks"), "samples", "deferred")
    tables["deferred_chunks"] = deferred[["time", "job", "step", "deferred"]]

    balances = _frame(records, "coin.balance")
    if balances.empty:
        tables["balances"] = pd.DataFrame(columns=["node", "balance"])
    else:
        tables["balances"] = (
            balances.groupby("node", sort=True)["value"].last().reset_index(name="balance")
        )
    return tables


def summarize(records: list[MetricRecord]) -> str:
    tables = build_tables(records)
    loss = tables["loss_curve"]["loss"]
    lines = [
        f"records: {len(records)}",
        f"training steps: {len(tables['step_latency'])}",
        f"first loss: {loss.iloc[0]:.6g}" if len(loss) else "first loss: n/a",
        f"final loss: {loss.iloc[-1]:.6g}" if len(loss) else "final loss: n/a",
        f"mean step ms: {tables['step_latency']['step_ms'].mean():.1f}"
        if len(tables["step_latency"])
        else "mean step ms: n/a",
        f"elections: {int(tables['elections']['count'].sum()) if len(tables['elections']) else 0}",
        f"max deferred chunks: "
        f"{int(tables['deferred_chunks']['deferred'].max()) if len(tables['deferred_chunks']) else 0}",
        f"safety violations: {sum(1 for r in records if r.metric == 'raft.safety_violation')}",
        f"datasets lost: {sum(1 for r in records if r.metric == 'dataset_lost')}",
    ]
    return "\n".join(lines) + "\n"


def write_report(records: list[MetricRecord], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, table in build_tables(records).items():
        table.to_csv(out_dir / f"{name}.csv", index=False)
    summary = out_dir / SUMMARY_FILE
    summary.write_text(summarize(records), encoding="utf-8")
    return summary
