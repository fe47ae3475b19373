"""Ranking losses over plan scores and the label plumbing around them.

Latencies map to reciprocal labels (faster plan = larger label), duplicate
plans collapse by fingerprint, and full rankings break into all pairwise
comparisons. Losses come in three flavors: pairwise log-likelihood of each
comparison, listwise log-likelihood of the whole ranking (the sequential
choice model over exponentiated scores), and a mean-squared-error baseline
on normalized latencies. Every loss returns its exact gradient with respect
to the scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import plan_ir
from .errors import EmptyList, NonPositiveLatency


def label_map(latency: float) -> float:
    """Reciprocal latency: reverses the order so the fastest plan ranks first."""
    if latency <= 0:
        raise NonPositiveLatency(f"latency must be > 0, got {latency}")
    return 1.0 / latency


@dataclass
class RankedList:
    """A query's plans ordered best (largest label) first."""

    query_id: str
    items: list[tuple[Any, float]]  # (plan ref, label)

    def __len__(self) -> int:
        return len(self.items)

    def refs(self) -> list:
        return [ref for ref, _ in self.items]

    def labels(self) -> list[float]:
        return [label for _, label in self.items]


def make_ranked_list(
    query_id: str,
    refs: Sequence[Any],
    latencies: Sequence[float],
    tiebreak: Optional[Sequence] = None,
) -> RankedList:
    """Order plan refs by reciprocal-latency label, best first.

    Exact latency ties are ordered by the tiebreak key (hint-set ids in the
    training pipeline) so the listwise ordering is deterministic.
    """
    labels = [label_map(lat) for lat in latencies]
    keys = tiebreak if tiebreak is not None else range(len(refs))
    order = sorted(range(len(refs)), key=lambda i: (-labels[i], keys[i]))
    return RankedList(query_id, [(refs[i], labels[i]) for i in order])


@dataclass(frozen=True)
class PairSample:
    """winner beat loser (strictly lower latency) for the same query."""

    query_id: str
    winner: Any
    loser: Any


def full_breaking(ranked: RankedList) -> list[PairSample]:
    """All n(n-1)/2 comparisons implied by the ranking; ties emit no pair."""
    pairs = []
    items = ranked.items
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if items[i][1] > items[j][1]:
                pairs.append(PairSample(ranked.query_id, items[i][0], items[j][0]))
    return pairs


@dataclass
class DedupEntry:
    """One unique plan with the mean latency of its duplicate group."""

    plan: plan_ir.PlanTree
    latency: float
    fingerprint: str
    source_indices: list[int]


def dedup_plans(
    plans_with_latencies: Sequence[tuple[plan_ir.PlanTree, float]],
) -> list[DedupEntry]:
    """Collapse structurally identical plans, averaging their latencies.

    Output preserves first-appearance order; source_indices point back at
    the contributing input positions.
    """
    groups: dict[str, DedupEntry] = {}
    sums: dict[str, float] = {}
    for idx, (plan, latency) in enumerate(plans_with_latencies):
        fp = plan_ir.fingerprint(plan)
        if fp not in groups:
            groups[fp] = DedupEntry(plan=plan, latency=0.0, fingerprint=fp, source_indices=[])
            sums[fp] = 0.0
        groups[fp].source_indices.append(idx)
        sums[fp] += latency
    entries = list(groups.values())
    for entry in entries:
        entry.latency = sums[entry.fingerprint] / len(entry.source_indices)
    return entries


# --- losses ------------------------------------------------------------------


def pl_pair_prob(s_i: float, s_j: float) -> float:
    """Probability that the item scored s_i beats the item scored s_j."""
    m = max(s_i, s_j)
    e_i = math.exp(s_i - m)
    e_j = math.exp(s_j - m)
    return e_i / (e_i + e_j)


def _pair_indices(pairs: Iterable) -> tuple[np.ndarray, np.ndarray]:
    winners, losers = [], []
    for pair in pairs:
        if isinstance(pair, PairSample):
            winners.append(pair.winner)
            losers.append(pair.loser)
        else:
            w, l = pair
            winners.append(w)
            losers.append(l)
    return np.asarray(winners, dtype=np.int64), np.asarray(losers, dtype=np.int64)


def pairwise_loss_and_grad(
    pairs: Iterable, scores: np.ndarray
) -> tuple[float, np.ndarray]:
    """Sum over pairs of -ln P(winner beats loser), plus d loss / d scores.

    Pairs may be PairSample instances or bare (winner, loser) tuples whose
    refs are integer indices into the scores array. Per pair the loss is
    softplus(-delta) with delta = s_winner - s_loser; the winner's gradient
    is -sigmoid(-delta) and the loser's is +sigmoid(-delta).
    """
    scores = np.asarray(scores, dtype=np.float64)
    grad = np.zeros_like(scores)
    winners, losers = _pair_indices(pairs)
    if winners.size == 0:
        return 0.0, grad
    delta = scores[winners] - scores[losers]
    loss = float(np.sum(np.logaddexp(0.0, -delta)))
    # sigmoid(-delta), computed without overflowing either tail
    q = np.exp(-np.logaddexp(0.0, delta))
    np.add.at(grad, winners, -q)
    np.add.at(grad, losers, q)
    return loss, grad


def listwise_loss_and_grad(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of the observed full ranking.

    scores must be aligned with a RankedList's order, best plan first.
    Stage j contributes ln(sum over the tail exp(s)) - s_j; gradients are
    the exact derivatives, g_k = -1 + sum_{j<=k} exp(s_k - tail_lse_j).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        raise EmptyList("listwise loss needs at least one item")
    tail_lse = np.empty(n)
    tail_lse[-1] = scores[-1]
    for j in range(n - 2, -1, -1):
        tail_lse[j] = np.logaddexp(scores[j], tail_lse[j + 1])
    loss = float(np.sum(tail_lse - scores))
    # exponent s_k - tail_lse_j is <= 0 exactly where the mask keeps it
    idx = np.arange(n)
    keep = idx[:, None] <= idx[None, :]
    expo = np.where(keep, scores[None, :] - tail_lse[:, None], -np.inf)
    grad = np.exp(expo).sum(axis=0) - 1.0
    return loss, grad


def regression_loss_and_grad(
    targets: np.ndarray, scores: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared error between scores and latency targets."""
    targets = np.asarray(targets, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    diff = scores - targets
    loss = float(np.mean(np.square(diff)))
    grad = 2.0 * diff / diff.size
    return loss, grad


def fit_regression_range(latencies: Iterable[float]) -> tuple[float, float]:
    """ln(1+x) min/max over training latencies, for target normalization."""
    logs = [math.log1p(lat) for lat in latencies]
    if not logs:
        raise EmptyList("cannot fit a target range on zero latencies")
    return min(logs), max(logs)


def regression_target(latency: float, lo: float, hi: float) -> float:
    """Min-max normalized ln(1+latency), clamped to [0, 1]."""
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, (math.log1p(latency) - lo) / (hi - lo)))
