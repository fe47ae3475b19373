"""Synthetic workload generator for exercising the pipeline end to end.

Simulates a cost-based optimizer over left-deep join trees: under a hint
set, every node picks the enabled operator with the lowest *estimated*
cost, while the recorded latency comes from the *true* per-operator time
of the chosen plan plus bounded multiplicative noise. The estimates
deliberately distort nested-loop and index costs, so the default plan is
sometimes a poor choice and better hint sets exist, which is exactly the
signal the scorer is supposed to learn from operator mix and sizes.

Run as a module to write a dataset and its catalog:

    python3 -m planrank.synth --out data.jsonl --catalog-out catalog.json
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datastore import ExecutionRecord
from .gateway import WorkloadQuery
from .hints import Catalog, HintSet, KNOBS, dump_catalog
from .errors import MissingRecord

# join knobs: hash, merge, nestloop; scan knobs: index, seq, indexonly
_SYNTH_FLAGS = (
    (True, True, True, True, True, True),
    (True, False, False, True, True, True),
    (False, True, False, True, True, True),
    (False, False, True, True, True, True),
    (True, True, True, False, True, False),
    (True, True, True, True, False, True),
    (True, False, False, False, True, False),
    (False, False, True, True, False, False),
)

# (true time coefficientry, optimizer distortion factor)
_TRUE = "true"
_EST = "est"


def synth_catalog() -> Catalog:
    return Catalog(tuple(HintSet(i, flags) for i, flags in enumerate(_SYNTH_FLAGS)))


@dataclass
class SynthConfig:
    num_templates: int = 25
    queries_per_template: int = 8
    seed: int = 7
    noise: float = 0.05  # multiplicative, +/- this fraction

    @property
    def num_queries(self) -> int:
        return self.num_templates * self.queries_per_template


# The estimate column distorts the true time the way over-tuned cost models
# tend to: nested loops look far cheaper than they are, hash joins look
# expensive, index scans look like a bargain. That makes the default plan
# wrong often enough that better hint sets exist and are worth learning.


def _scan_times(kind: str, base_rows: float, out_rows: float) -> dict:
    if kind == "Seq Scan":
        true = 0.010 * base_rows + 4.0
        return {_TRUE: true, _EST: true * 1.0}
    if kind == "Index Scan":
        true = 0.45 * out_rows**0.85 + 8.0
        return {_TRUE: true, _EST: true * 0.45}
    # Index Only Scan
    true = 0.34 * out_rows**0.85 + 8.0
    return {_TRUE: true, _EST: true * 0.50}


def _join_times(kind: str, left_rows: float, right_rows: float) -> dict:
    both = left_rows + right_rows
    if kind == "Hash Join":
        true = 0.012 * both + 15.0
        return {_TRUE: true, _EST: true * 1.60}
    if kind == "Merge Join":
        true = 0.011 * both * (1.0 + 0.09 * math.log1p(both)) + 6.0
        return {_TRUE: true, _EST: true * 0.80}
    true = 4.2e-4 * left_rows * right_rows + 2.0
    return {_TRUE: true, _EST: true * 0.25}


_JOIN_KINDS = {  # knob position in KNOBS order -> operator it enables
    0: "Hash Join",
    1: "Merge Join",
    2: "Nested Loop",
}
_SCAN_KINDS = {
    3: "Index Scan",
    4: "Seq Scan",
    5: "Index Only Scan",
}


@dataclass
class _QuerySpec:
    query_id: str
    template_id: str
    num_joins: int
    base_rows: list[float]  # per relation
    selectivities: list[float]  # per leaf filter
    fanouts: list[float]  # per join
    has_sort: bool
    has_agg: bool


class SynthSource:
    """Deterministic fake optimizer + executor behind the PlanSource contract."""

    def __init__(self, config: SynthConfig):
        self.config = config
        self.catalog = synth_catalog()
        self._specs = {q.query_id: q for q in self._make_specs()}

    def _make_specs(self) -> list[_QuerySpec]:
        rng = np.random.default_rng(self.config.seed)
        specs = []
        for t in range(self.config.num_templates):
            template_id = f"t{t:02d}"
            num_joins = 2 + t % 4
            magnitude = 10 ** (2.5 + (t % 5) * 0.55)
            for q in range(self.config.queries_per_template):
                query_id = f"{template_id}_q{q:03d}"
                specs.append(
                    _QuerySpec(
                        query_id=query_id,
                        template_id=template_id,
                        num_joins=num_joins,
                        base_rows=[
                            float(rng.uniform(0.2, 5.0) * magnitude)
                            for _ in range(num_joins + 1)
                        ],
                        selectivities=[
                            float(rng.uniform(0.02, 1.0)) for _ in range(num_joins + 1)
                        ],
                        fanouts=[float(rng.uniform(0.1, 2.5)) for _ in range(num_joins)],
                        has_sort=t % 3 == 0,
                        has_agg=t % 2 == 0,
                    )
                )
        return specs

    def queries(self) -> list[WorkloadQuery]:
        return [
            WorkloadQuery(s.query_id, s.template_id, f"SELECT /* {s.query_id} */ 1")
            for s in self._specs.values()
        ]

    def _spec(self, query: WorkloadQuery) -> _QuerySpec:
        if query.query_id not in self._specs:
            raise MissingRecord(f"unknown synthetic query {query.query_id}")
        return self._specs[query.query_id]

    def _build_plan(self, spec: _QuerySpec, hint: HintSet) -> tuple[dict, float]:
        """The min-estimated-cost plan under the hint set and its true time."""
        scans_enabled = [k for i, k in _SCAN_KINDS.items() if hint.flags[i]]
        joins_enabled = [k for i, k in _JOIN_KINDS.items() if hint.flags[i]]

        def scan_node(leaf: int) -> tuple[dict, float, float, float]:
            base = spec.base_rows[leaf]
            out = max(1.0, base * spec.selectivities[leaf])
            best = min(scans_enabled, key=lambda k: _scan_times(k, base, out)[_EST])
            times = _scan_times(best, base, out)
            node = {
                "Node Type": best,
                "Total Cost": round(times[_EST], 4),
                "Plan Rows": round(out, 2),
                "Relation Name": f"rel_{leaf}",
            }
            if best != "Seq Scan":
                node["Index Name"] = f"rel_{leaf}_pk"
            return node, out, times[_TRUE], times[_EST]

        node, rows, true_total, est_total = scan_node(0)
        for j in range(spec.num_joins):
            right, right_rows, right_true, right_est = scan_node(j + 1)
            best = min(
                joins_enabled, key=lambda k: _join_times(k, rows, right_rows)[_EST]
            )
            times = _join_times(best, rows, right_rows)
            out = max(1.0, min(rows, right_rows) * spec.fanouts[j])
            true_total += right_true + times[_TRUE]
            est_total += right_est + times[_EST]
            node = {
                "Node Type": best,
                "Total Cost": round(est_total, 4),
                "Plan Rows": round(out, 2),
                "Plans": [node, right],
            }
            rows = out
        if spec.has_sort:
            true = 0.006 * rows * math.log1p(rows) + 3.0
            true_total += true
            est_total += true
            node = {
                "Node Type": "Sort",
                "Total Cost": round(est_total, 4),
                "Plan Rows": round(rows, 2),
                "Plans": [node],
            }
        if spec.has_agg:
            true = 0.004 * rows + 2.0
            true_total += true
            est_total += true
            node = {
                "Node Type": "Aggregate",
                "Total Cost": round(est_total, 4),
                "Plan Rows": 1,
                "Plans": [node],
            }
        return {"Plan": node}, true_total

    def plan_for(self, query: WorkloadQuery, hint: HintSet) -> str:
        document, _ = self._build_plan(self._spec(query), hint)
        return json.dumps([document])

    def measure(self, query: WorkloadQuery, hint: HintSet) -> tuple[float, bool]:
        spec = self._spec(query)
        _, true_time = self._build_plan(spec, hint)
        digest = hashlib.sha256(
            f"{self.config.seed}|{query.query_id}|{hint.id}".encode()
        ).digest()
        noise_rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        factor = 1.0 + float(noise_rng.uniform(-self.config.noise, self.config.noise))
        return max(1e-3, true_time * factor), False


def generate_records(config: SynthConfig) -> list[ExecutionRecord]:
    source = SynthSource(config)
    records = []
    for query in source.queries():
        for hint in source.catalog:
            plan_json = source.plan_for(query, hint)
            latency_ms, timed_out = source.measure(query, hint)
            records.append(
                ExecutionRecord(
                    query_id=query.query_id,
                    template_id=query.template_id,
                    sql=query.sql,
                    hint_set_id=hint.id,
                    plan_json=plan_json,
                    latency_ms=latency_ms,
                    timed_out=timed_out,
                    collected_at="synthetic",
                )
            )
    return records


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Generate a synthetic hint-exploration dataset."
    )
    parser.add_argument("--out", required=True, help="dataset file to write (JSONL)")
    parser.add_argument("--catalog-out", help="also write the 8-entry catalog here")
    parser.add_argument("--templates", type=int, default=25)
    parser.add_argument("--queries-per-template", type=int, default=8)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)

    config = SynthConfig(
        num_templates=args.templates,
        queries_per_template=args.queries_per_template,
        seed=args.seed,
    )
    records = generate_records(config)
    out = Path(args.out)
    out.write_text(
        "".join(r.to_json() + "\n" for r in records), encoding="utf-8"
    )
    if args.catalog_out:
        Path(args.catalog_out).write_text(dump_catalog(synth_catalog()), encoding="utf-8")
    print(f"wrote {len(records)} records for {config.num_queries} queries to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
