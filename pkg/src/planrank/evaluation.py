"""Evaluation of a trained scorer and spectrum analysis of its embeddings.

The evaluation report mirrors the deployment objective: per query, which
hint the model picks, the recorded latency of that pick, how it compares
to the default plan and to the per-query oracle (the fastest recorded
candidate), and the aggregate speedup Sum(default) / Sum(selected). The
spectrum report eigendecomposes the covariance of plan embeddings and
counts dimensions whose singular value falls below 1e-7, the signature of
a collapsed embedding space.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import plan_ir, scorer
from .datastore import QueryEntry
from .errors import (
    EmptyTestSet,
    MissingLatency,
    NonPositiveTotal,
    TooFewPlans,
)

COLLAPSE_THRESHOLD = 1e-7


def speedup(default_total: float, selected_total: float) -> float:
    """Sum of default latencies over sum of selected latencies."""
    if default_total <= 0 or selected_total <= 0:
        raise NonPositiveTotal("latency totals must be positive")
    return default_total / selected_total


@dataclass
class QueryRow:
    query_id: str
    template_id: str
    default_latency: float
    selected_hint_id: int
    selected_latency: float
    oracle_latency: float


@dataclass
class TemplateRow:
    template_id: str
    num_queries: int
    default_latency: float  # mean over the template's queries
    selected_latency: float
    oracle_latency: float


@dataclass
class EvalReport:
    rows: list[QueryRow]
    per_template: list[TemplateRow]
    speedup: float
    oracle_speedup: float
    regression_count: int

    def to_dict(self) -> dict:
        return {
            "speedup": self.speedup,
            "oracle_speedup": self.oracle_speedup,
            "regression_count": self.regression_count,
            "num_queries": len(self.rows),
            "per_template": [asdict(t) for t in self.per_template],
            "queries": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"queries:      {len(self.rows)}",
            f"speedup:      {self.speedup:.2f}",
            f"oracle:       {self.oracle_speedup:.2f}",
            f"regressions:  {self.regression_count}",
            "",
            f"{'template':<16}{'queries':>8}{'default':>14}{'selected':>14}{'oracle':>14}",
        ]
        for t in self.per_template:
            lines.append(
                f"{t.template_id:<16}{t.num_queries:>8}"
                f"{t.default_latency:>14.3f}{t.selected_latency:>14.3f}"
                f"{t.oracle_latency:>14.3f}"
            )
        return "\n".join(lines)


def encode_entry(params: scorer.ScorerParams, entry: QueryEntry):
    """Encode a query's candidates with the checkpoint's scaler."""
    return [
        plan_ir.encode(plan_ir.binarize(c.plan), params.scaler)
        for c in entry.candidates
    ]


def model_selector(params: scorer.ScorerParams) -> Callable[[QueryEntry], int]:
    """Candidate index chooser: highest score, ties to the lowest hint id."""

    def choose(entry: QueryEntry) -> int:
        scores = scorer.score_trees(params, encode_entry(params, entry))
        best = 0
        for i in range(1, len(entry.candidates)):
            better = scores[i] > scores[best]
            tied = scores[i] == scores[best]
            if better or (
                tied
                and entry.candidates[i].hint_set_ids[0]
                < entry.candidates[best].hint_set_ids[0]
            ):
                best = i
        return best

    return choose


def evaluate_with_selector(
    entries: Sequence[QueryEntry], selector: Callable[[QueryEntry], int]
) -> EvalReport:
    if not entries:
        raise EmptyTestSet("no test queries to evaluate")
    rows = []
    for entry in entries:
        idx = selector(entry)
        cand = entry.candidates[idx]
        if cand.latency is None or entry.default_latency is None:
            raise MissingLatency(f"query {entry.query_id} lacks a recorded latency")
        rows.append(
            QueryRow(
                query_id=entry.query_id,
                template_id=entry.template_id,
                default_latency=entry.default_latency,
                selected_hint_id=cand.hint_set_ids[0],
                selected_latency=cand.latency,
                oracle_latency=entry.oracle_latency(),
            )
        )

    by_template: dict[str, list[QueryRow]] = {}
    for row in rows:
        by_template.setdefault(row.template_id, []).append(row)
    per_template = [
        TemplateRow(
            template_id=template,
            num_queries=len(group),
            default_latency=float(np.mean([r.default_latency for r in group])),
            selected_latency=float(np.mean([r.selected_latency for r in group])),
            oracle_latency=float(np.mean([r.oracle_latency for r in group])),
        )
        for template, group in sorted(by_template.items())
    ]

    default_total = sum(r.default_latency for r in rows)
    selected_total = sum(r.selected_latency for r in rows)
    oracle_total = sum(r.oracle_latency for r in rows)
    return EvalReport(
        rows=rows,
        per_template=per_template,
        speedup=speedup(default_total, selected_total),
        oracle_speedup=speedup(default_total, oracle_total),
        regression_count=sum(1 for r in rows if r.selected_latency > r.default_latency),
    )


def evaluate(params: scorer.ScorerParams, entries: Sequence[QueryEntry]) -> EvalReport:
    return evaluate_with_selector(entries, model_selector(params))


# --- embedding spectrum --------------------------------------------------------


@dataclass
class SpectrumReport:
    singular_values: list[float]  # sorted descending
    log10_values: list[float]  # -inf where the value is exactly 0
    collapse_count: int
    num_embeddings: int
    threshold: float = COLLAPSE_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "collapse_count": self.collapse_count,
            "num_embeddings": self.num_embeddings,
            "singular_values": self.singular_values,
            "log10_values": [
                v if np.isfinite(v) else None for v in self.log10_values
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["k,sigma,log10_sigma"]
        for k, (sig, log) in enumerate(zip(self.singular_values, self.log10_values)):
            lines.append(f"{k},{sig!r},{log!r}")
        return "\n".join(lines) + "\n"


def spectrum_from_embeddings(
    embeddings: np.ndarray, threshold: float = COLLAPSE_THRESHOLD
) -> SpectrumReport:
    """Covariance eigen-spectrum of an (M, h) embedding matrix.

    The covariance is symmetric PSD, so its singular values equal its
    eigenvalues; a symmetric eigensolver keeps everything in double
    precision. Dimensions with singular value below the threshold count
    as collapsed.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise TooFewPlans("spectrum needs at least two embeddings")
    centered = z - z.mean(axis=0)
    cov = centered.T @ centered / z.shape[0]
    eigenvalues = np.linalg.eigvalsh(cov)
    singular = np.sort(np.abs(eigenvalues))[::-1]
    with np.errstate(divide="ignore"):
        log10 = np.log10(singular)
    return SpectrumReport(
        singular_values=[float(v) for v in singular],
        log10_values=[float(v) for v in log10],
        collapse_count=int(np.sum(singular < threshold)),
        num_embeddings=z.shape[0],
        threshold=threshold,
    )


def embedding_spectrum(
    params: scorer.ScorerParams,
    plans: Sequence[plan_ir.PlanTree],
    threshold: float = COLLAPSE_THRESHOLD,
) -> SpectrumReport:
    """Spectrum over the embeddings of the unique plans in the collection."""
    unique: dict[str, plan_ir.PlanTree] = {}
    for plan in plans:
        unique.setdefault(plan_ir.fingerprint(plan), plan)
    if len(unique) < 2:
        raise TooFewPlans(f"need >= 2 unique plans, got {len(unique)}")
    embeddings = np.stack(
        [
            scorer.embed(params, plan_ir.encode(plan_ir.binarize(p), params.scaler))
            for p in unique.values()
        ]
    )
    return spectrum_from_embeddings(embeddings, threshold)
