"""Execution-record files, per-query candidate grouping, and dataset splits.

Records live in line-delimited JSON so collection can append and resume.
Grouping parses each query's plans, deduplicates them by fingerprint with
mean latencies, and attaches the default-plan latency. Splits carve
train/test sets four ways: unseen templates vs unseen queries of known
templates, each picked at random or by largest default latency.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import ltr, plan_ir
from .errors import (
    DuplicateQueryId,
    InsufficientQueriesPerTemplate,
    InsufficientTemplates,
    InvalidHintSet,
    MissingDefaultPlan,
    PlanRankError,
    SchemaViolation,
)
from .hints import Catalog


@dataclass
class ExecutionRecord:
    """One measured (query, hint set, plan, latency) observation."""

    query_id: str
    template_id: str
    sql: str
    hint_set_id: int
    plan_json: str
    latency_ms: float
    timed_out: bool = False
    collected_at: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


_FIELD_TYPES = {
    "query_id": str,
    "template_id": str,
    "sql": str,
    "hint_set_id": int,
    "plan_json": str,
    "latency_ms": (int, float),
    "timed_out": bool,
    "collected_at": str,
}


def _record_from_obj(obj: dict, line_no: int) -> ExecutionRecord:
    if not isinstance(obj, dict):
        raise SchemaViolation(line_no, "record is not a JSON object")
    for name, types in _FIELD_TYPES.items():
        if name not in obj:
            raise SchemaViolation(line_no, f"missing field {name!r}")
        value = obj[name]
        if isinstance(value, bool) and types is not bool:
            raise SchemaViolation(line_no, f"field {name!r} has wrong type")
        if not isinstance(value, types):
            raise SchemaViolation(line_no, f"field {name!r} has wrong type")
    if obj["latency_ms"] <= 0:
        raise SchemaViolation(line_no, "latency_ms must be > 0")
    if obj["hint_set_id"] < 0:
        raise SchemaViolation(line_no, "hint_set_id must be >= 0")
    return ExecutionRecord(**{k: obj[k] for k in _FIELD_TYPES})


def append_records(records: Iterable[ExecutionRecord], path: Union[str, Path]) -> int:
    """Append records as JSON lines; returns how many were written."""
    count = 0
    with open(path, "a", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")
            count += 1
    return count


def load_records(path: Union[str, Path]) -> list[ExecutionRecord]:
    """Read a record file, preserving order; bad lines carry their number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(line_no, f"invalid JSON: {exc}") from exc
            records.append(_record_from_obj(obj, line_no))
    return records


@dataclass
class Candidate:
    """A unique plan for one query, with the mean latency of its duplicates."""

    fingerprint: str
    plan: plan_ir.PlanTree
    latency: float
    hint_set_ids: list[int]


@dataclass
class QueryEntry:
    """One query's deduplicated candidate plans."""

    query_id: str
    template_id: str
    sql: str
    candidates: list[Candidate]
    default_latency: float

    def oracle_latency(self) -> float:
        return min(c.latency for c in self.candidates)


def group_queries(
    records: Sequence[ExecutionRecord], catalog: Catalog
) -> list[QueryEntry]:
    """Group records per query, parse and dedupe plans, attach defaults.

    Every query must include a record for hint set 0 (the default plan);
    its deduplicated latency becomes the query's baseline.
    """
    by_query: dict[str, list[ExecutionRecord]] = {}
    for record in records:
        if not 0 <= record.hint_set_id < len(catalog):
            raise InvalidHintSet(
                f"record for {record.query_id} uses hint_set_id "
                f"{record.hint_set_id}, catalog has {len(catalog)} entries"
            )
        by_query.setdefault(record.query_id, []).append(record)

    entries = []
    for query_id, group in by_query.items():
        if not any(r.hint_set_id == 0 for r in group):
            raise MissingDefaultPlan(f"query {query_id} has no hint-set-0 record")
        plans = []
        for r in group:
            try:
                plans.append(plan_ir.parse_explain(r.plan_json))
            except PlanRankError as exc:
                raise type(exc)(
                    f"query {query_id}, hint set {r.hint_set_id}: {exc}"
                ) from exc
        dedup = ltr.dedup_plans(
            [(plan, r.latency_ms) for plan, r in zip(plans, group)]
        )
        candidates = []
        default_latency = None
        for entry in dedup:
            hint_ids = sorted(group[i].hint_set_id for i in entry.source_indices)
            candidates.append(
                Candidate(
                    fingerprint=entry.fingerprint,
                    plan=entry.plan,
                    latency=entry.latency,
                    hint_set_ids=hint_ids,
                )
            )
            if 0 in hint_ids:
                default_latency = entry.latency
        entries.append(
            QueryEntry(
                query_id=query_id,
                template_id=group[0].template_id,
                sql=group[0].sql,
                candidates=candidates,
                default_latency=default_latency,
            )
        )
    return entries


# --- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str  # "adhoc" (unseen templates) or "repeat" (unseen queries)
    selection: str  # "rand" or "slow"
    holdout: int  # templates for adhoc, queries per template for repeat
    seed: int = 0

    def validate(self) -> None:
        if self.scenario not in ("adhoc", "repeat"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.selection not in ("rand", "slow"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.holdout < 1:
            raise ValueError("holdout must be >= 1")


@dataclass
class SplitResult:
    train_queries: list[str]
    test_queries: list[str]
    spec: ScenarioSpec

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "train": self.train_queries,
            "test": self.test_queries,
        }


def make_split(entries: Sequence[QueryEntry], spec: ScenarioSpec) -> SplitResult:
    """Deterministic train/test split per the scenario and selection rule."""
    spec.validate()
    by_template: dict[str, list[QueryEntry]] = {}
    for entry in entries:
        by_template.setdefault(entry.template_id, []).append(entry)
    templates = sorted(by_template)
    rng = np.random.default_rng(spec.seed)

    test_ids: list[str] = []
    if spec.scenario == "adhoc":
        if spec.holdout >= len(templates):
            raise InsufficientTemplates(
                f"holdout {spec.holdout} needs more than {len(templates)} templates"
            )
        if spec.selection == "rand":
            chosen = list(rng.choice(templates, size=spec.holdout, replace=False))
        else:
            totals = {
                t: sum(e.default_latency for e in by_template[t]) for t in templates
            }
            chosen = sorted(templates, key=lambda t: (-totals[t], t))[: spec.holdout]
        chosen_set = set(chosen)
        test_ids = [e.query_id for e in entries if e.template_id in chosen_set]
    else:
        smallest = min(len(group) for group in by_template.values())
        if spec.holdout >= smallest:
            raise InsufficientQueriesPerTemplate(
                f"holdout {spec.holdout} needs more than {smallest} queries "
                "in every template"
            )
        for template in templates:
            group = sorted(by_template[template], key=lambda e: e.query_id)
            if spec.selection == "rand":
                picks = rng.choice(len(group), size=spec.holdout, replace=False)
                test_ids.extend(group[i].query_id for i in sorted(picks))
            else:
                ranked = sorted(group, key=lambda e: (-e.default_latency, e.query_id))
                test_ids.extend(e.query_id for e in ranked[: spec.holdout])

    test_set = set(test_ids)
    train_ids = [e.query_id for e in entries if e.query_id not in test_set]
    return SplitResult(
        train_queries=sorted(train_ids), test_queries=sorted(test_ids), spec=spec
    )


def save_split(split: SplitResult, path: Union[str, Path]) -> None:
    Path(path).write_text(
        json.dumps(split.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )


def load_split(path: Union[str, Path]) -> SplitResult:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return SplitResult(
        train_queries=list(doc["train"]),
        test_queries=list(doc["test"]),
        spec=ScenarioSpec(**doc["spec"]),
    )


def select_entries(
    entries: Sequence[QueryEntry], query_ids: Iterable[str]
) -> list[QueryEntry]:
    wanted = set(query_ids)
    return [e for e in entries if e.query_id in wanted]


def merge_datasets(
    a: Sequence[QueryEntry], b: Sequence[QueryEntry]
) -> list[QueryEntry]:
    """Concatenate two grouped datasets; query ids must not collide."""
    ids_a = {e.query_id for e in a}
    clashes = ids_a & {e.query_id for e in b}
    if clashes:
        raise DuplicateQueryId(f"query ids present in both datasets: {sorted(clashes)[:5]}")
    return list(a) + list(b)


def plan_statistics(entries: Sequence[QueryEntry]) -> dict:
    """Workload-level plan shape statistics plus dataset counts."""
    nodes = []
    depths = []
    for entry in entries:
        for cand in entry.candidates:
            nodes.append(cand.plan.node_count)
            depths.append(cand.plan.depth)
    return {
        "num_queries": len(entries),
        "num_templates": len({e.template_id for e in entries}),
        "num_unique_plans": len(nodes),
        "max_nodes": max(nodes) if nodes else 0,
        "avg_nodes": float(np.mean(nodes)) if nodes else 0.0,
        "max_depth": max(depths) if depths else 0,
        "avg_depth": float(np.mean(depths)) if depths else 0.0,
    }
