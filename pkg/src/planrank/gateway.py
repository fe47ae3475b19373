"""Plan and latency acquisition: a live DBMS client and a replay source.

The live client steers the planner with SET statements, fetches EXPLAIN
(FORMAT JSON) plans, and times executions with a statement timeout; plans
that exceed the timeout are recorded at the cap as censored latencies. The
replay source serves previously collected record files so training and
evaluation run without any database.
"""

from __future__ import annotations

import json
import os
import statistics
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

from .datastore import ExecutionRecord, append_records, load_records
from .errors import MissingRecord, SqlError
from .hints import Catalog, HintSet, reset_statements, to_set_statements

QUERY_CANCELED_SQLSTATE = "57014"


@dataclass
class DbConfig:
    host: str = "localhost"
    port: int = 5432
    database: str = "postgres"
    user: str = "postgres"
    password_env: str = "PLANRANK_DB_PASSWORD"  # secret read from env, never stored
    timeout_ms: int = 300_000
    repetitions: int = 1

    def validate(self) -> None:
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass(frozen=True)
class WorkloadQuery:
    query_id: str
    template_id: str
    sql: str


class PlanSource(Protocol):
    """Anything that can plan and time a query under a hint set."""

    def plan_for(self, query: WorkloadQuery, hint: HintSet) -> str: ...

    def measure(self, query: WorkloadQuery, hint: HintSet) -> tuple[float, bool]: ...


def _default_connect(config: DbConfig):
    import psycopg2  # optional dependency, install the [live] extra

    return psycopg2.connect(
        host=config.host,
        port=config.port,
        dbname=config.database,
        user=config.user,
        password=os.environ.get(config.password_env, ""),
    )


def _is_timeout(exc: Exception) -> bool:
    if getattr(exc, "pgcode", None) == QUERY_CANCELED_SQLSTATE:
        return True
    return "statement timeout" in str(exc)


class LiveSource:
    """DBAPI-backed plan source; the connection factory is injectable."""

    def __init__(
        self, config: DbConfig, connect: Optional[Callable[[DbConfig], object]] = None
    ):
        config.validate()
        self.config = config
        self._connect = connect or _default_connect
        self._conn = None

    def _connection(self):
        if self._conn is None:
            self._conn = self._connect(self.config)
        return self._conn

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def _execute(self, cursor, sql: str) -> None:
        try:
            cursor.execute(sql)
        except Exception as exc:
            if _is_timeout(exc):
                raise
            raise SqlError(f"{type(exc).__name__}: {exc}") from exc

    def _apply_hint(self, cursor, hint: HintSet) -> None:
        for stmt in to_set_statements(hint):
            self._execute(cursor, stmt)

    def _reset(self, cursor) -> None:
        for stmt in reset_statements():
            self._execute(cursor, stmt)
        self._execute(cursor, "SET statement_timeout = 0")

    def plan_for(self, query: WorkloadQuery, hint: HintSet) -> str:
        cursor = self._connection().cursor()
        try:
            self._apply_hint(cursor, hint)
            self._execute(cursor, f"EXPLAIN (FORMAT JSON) {query.sql}")
            row = cursor.fetchone()
            document = row[0]
            if not isinstance(document, str):
                document = json.dumps(document)
            return document
        finally:
            self._reset(cursor)
            cursor.close()

    def measure(self, query: WorkloadQuery, hint: HintSet) -> tuple[float, bool]:
        """Median client-side wall time over the configured repetitions.

        A run that exceeds the timeout is cancelled by the server; the
        latency is then censored at timeout_ms.
        """
        cursor = self._connection().cursor()
        try:
            self._apply_hint(cursor, hint)
            self._execute(cursor, f"SET statement_timeout = {self.config.timeout_ms}")
            times = []
            for _ in range(self.config.repetitions):
                start = time.perf_counter()
                try:
                    self._execute(cursor, query.sql)
                except Exception as exc:
                    if _is_timeout(exc):
                        return float(self.config.timeout_ms), True
                    raise
                times.append((time.perf_counter() - start) * 1000.0)
            return float(statistics.median(times)), False
        finally:
            self._reset(cursor)
            cursor.close()


class ReplaySource:
    """Serves plan_for and measure out of a recorded dataset."""

    def __init__(self, records: Sequence[ExecutionRecord]):
        self._by_key: dict[tuple[str, int], ExecutionRecord] = {}
        for record in records:
            self._by_key.setdefault((record.query_id, record.hint_set_id), record)

    def _lookup(self, query: WorkloadQuery, hint: HintSet) -> ExecutionRecord:
        key = (query.query_id, hint.id)
        if key not in self._by_key:
            raise MissingRecord(f"no record for query {query.query_id}, hint {hint.id}")
        return self._by_key[key]

    def plan_for(self, query: WorkloadQuery, hint: HintSet) -> str:
        return self._lookup(query, hint).plan_json

    def measure(self, query: WorkloadQuery, hint: HintSet) -> tuple[float, bool]:
        record = self._lookup(query, hint)
        return record.latency_ms, record.timed_out

    def queries(self) -> list[WorkloadQuery]:
        seen: dict[str, WorkloadQuery] = {}
        for record in self._by_key.values():
            if record.query_id not in seen:
                seen[record.query_id] = WorkloadQuery(
                    record.query_id, record.template_id, record.sql
                )
        return list(seen.values())


def replay_source(path: Union[str, Path]) -> ReplaySource:
    return ReplaySource(load_records(path))


def collect(
    source: PlanSource,
    queries: Sequence[WorkloadQuery],
    catalog: Catalog,
    out_path: Union[str, Path],
) -> int:
    """Measure every query under every hint set, appending to out_path.

    Serial by design so timings do not interfere. Resumable: (query, hint)
    pairs already in the file are skipped. Per-item failures go to a
    .failures.jsonl manifest next to the output and collection continues.
    """
    out_path = Path(out_path)
    done: set[tuple[str, int]] = set()
    if out_path.exists():
        done = {(r.query_id, r.hint_set_id) for r in load_records(out_path)}

    manifest_path = out_path.with_name(out_path.name + ".failures.jsonl")
    written = 0
    for query in queries:
        for hint in catalog:
            if (query.query_id, hint.id) in done:
                continue
            try:
                plan_json = source.plan_for(query, hint)
                latency_ms, timed_out = source.measure(query, hint)
                record = ExecutionRecord(
                    query_id=query.query_id,
                    template_id=query.template_id,
                    sql=query.sql,
                    hint_set_id=hint.id,
                    plan_json=plan_json,
                    latency_ms=latency_ms,
                    timed_out=timed_out,
                    collected_at=datetime.now(timezone.utc).isoformat(),
                )
                append_records([record], out_path)
                written += 1
            except (SqlError, MissingRecord) as exc:
                failure = {
                    "query_id": query.query_id,
                    "hint_set_id": hint.id,
                    "error": type(exc).__name__,
                    "message": str(exc),
                }
                with open(manifest_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(failure, sort_keys=True) + "\n")
    return written
