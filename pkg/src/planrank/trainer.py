"""Supervised training loop for the plan scorer.

Builds samples per mode (all pairwise comparisons, one ranked list per
query, or one regression item per unique plan), runs seeded mini-batch
epochs under Adam, early-stops on stalled training loss, and returns the
checkpoint that did best on the held-out validation queries, where best
means lowest total latency of the plans the model would pick.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ltr, nn, plan_ir, scorer
from .datastore import QueryEntry
from .errors import (
    EmptyDataset,
    MissingLatency,
    NonFiniteGradient,
    NonFiniteLoss,
)

MODES = ("pairwise", "listwise", "regression")


@dataclass
class TrainConfig:
    mode: str = "pairwise"
    learning_rate: float = 0.001
    max_epochs: int = 100
    early_stop_patience: int = 10
    pairs_per_batch: int = 256
    lists_per_batch: int = 16
    items_per_batch: int = 256
    validation_fraction: float = 0.10
    seed: int = 0
    shuffle: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def batch_size(self) -> int:
        return {
            "pairwise": self.pairs_per_batch,
            "listwise": self.lists_per_batch,
            "regression": self.items_per_batch,
        }[self.mode]

    def digest(self) -> str:
        canonical = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainReport:
    mode: str
    train_losses: list[float]
    validation_metrics: list[float]
    best_epoch: int  # 1-based epoch whose checkpoint was kept
    wall_seconds: float
    num_queries: int
    num_train_queries: int
    num_validation_queries: int
    num_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def ranked_candidate_order(entry: QueryEntry) -> list[int]:
    """Candidate indices best (lowest latency) first; ties by lowest hint id."""
    ranked = ltr.make_ranked_list(
        entry.query_id,
        refs=list(range(len(entry.candidates))),
        latencies=[c.latency for c in entry.candidates],
        tiebreak=[c.hint_set_ids[0] for c in entry.candidates],
    )
    return ranked.refs()


def build_samples(entries: Sequence[QueryEntry], mode: str):
    """Training samples for a mode.

    pairwise: (entry_idx, winner_cand, loser_cand) from full rank-breaking.
    listwise: one entry index per query.
    regression: (entry_idx, cand_idx, target) per unique plan, targets =
    min-max normalized ln(1+latency) over the whole collection.
    """
    if not entries:
        raise EmptyDataset("no queries to build samples from")
    if mode == "pairwise":
        samples = []
        for entry_idx, entry in enumerate(entries):
            ranked = ltr.make_ranked_list(
                entry.query_id,
                refs=list(range(len(entry.candidates))),
                latencies=[c.latency for c in entry.candidates],
                tiebreak=[c.hint_set_ids[0] for c in entry.candidates],
            )
            for pair in ltr.full_breaking(ranked):
                samples.append((entry_idx, pair.winner, pair.loser))
        return samples
    if mode == "listwise":
        return list(range(len(entries)))
    if mode == "regression":
        lo, hi = ltr.fit_regression_range(
            c.latency for entry in entries for c in entry.candidates
        )
        # targets are flipped (1 - normalized latency) so that a higher
        # model output always means a faster plan, keeping argmax hint
        # selection meaningful for regression checkpoints too
        return [
            (entry_idx, cand_idx, 1.0 - ltr.regression_target(c.latency, lo, hi))
            for entry_idx, entry in enumerate(entries)
            for cand_idx, c in enumerate(entry.candidates)
        ]
    raise ValueError(f"unknown mode {mode!r}")


def _encode_tensors(
    entries: Sequence[QueryEntry], scaler: plan_ir.FeatureScaler
) -> list[list[nn.TreeTensor]]:
    return [
        [
            scorer.to_tensor(plan_ir.encode(plan_ir.binarize(c.plan), scaler))
            for c in entry.candidates
        ]
        for entry in entries
    ]


def _selected_latency_total(
    params: scorer.ScorerParams,
    entries: Sequence[QueryEntry],
    tensors: list[list[nn.TreeTensor]],
) -> float:
    total = 0.0
    for entry, trees in zip(entries, tensors):
        scores, _ = scorer.forward_batch(params, nn.pack_forest(trees))
        best = 0
        for i in range(1, len(scores)):
            better = scores[i] > scores[best]
            tied = scores[i] == scores[best]
            if better or (
                tied
                and entry.candidates[i].hint_set_ids[0]
                < entry.candidates[best].hint_set_ids[0]
            ):
                best = i
        latency = entry.candidates[best].latency
        if latency is None:
            raise MissingLatency(f"query {entry.query_id} lacks a recorded latency")
        total += latency
    return total


def validate(params: scorer.ScorerParams, entries: Sequence[QueryEntry]) -> float:
    """Total recorded latency of the plans the model would select."""
    if not entries:
        raise EmptyDataset("no validation queries")
    return _selected_latency_total(params, entries, _encode_tensors(entries, params.scaler))


def _batch_loss_and_grads(params, mode, batch, samples_meta, tensors):
    """Forward/backward one mini-batch; loss is normalized per sample."""
    if mode == "pairwise":
        keys = []
        index = {}
        for entry_idx, w, l in batch:
            for cand in (w, l):
                if (entry_idx, cand) not in index:
                    index[(entry_idx, cand)] = len(keys)
                    keys.append((entry_idx, cand))
        forest = nn.pack_forest([tensors[e][c] for e, c in keys])
        scores, cache = scorer.forward_batch(params, forest)
        pairs = [(index[(e, w)], index[(e, l)]) for e, w, l in batch]
        loss, dscores = ltr.pairwise_loss_and_grad(pairs, scores)
        scale = 1.0 / len(batch)
    elif mode == "listwise":
        keys = []
        slices = []
        for entry_idx in batch:
            order = samples_meta[entry_idx]
            start = len(keys)
            keys.extend((entry_idx, c) for c in order)
            slices.append((start, len(keys)))
        forest = nn.pack_forest([tensors[e][c] for e, c in keys])
        scores, cache = scorer.forward_batch(params, forest)
        loss = 0.0
        dscores = np.zeros_like(scores)
        for start, end in slices:
            part_loss, part_grad = ltr.listwise_loss_and_grad(scores[start:end])
            loss += part_loss
            dscores[start:end] = part_grad
        scale = 1.0 / len(batch)
    else:
        forest = nn.pack_forest([tensors[e][c] for e, c, _ in batch])
        scores, cache = scorer.forward_batch(params, forest)
        targets = np.array([t for _, _, t in batch])
        loss, dscores = ltr.regression_loss_and_grad(targets, scores)
        scale = 1.0  # already a mean

    grads = scorer.backward_batch(params, cache, dscores * scale)
    return loss * scale, grads


def train(
    entries: Sequence[QueryEntry],
    config: TrainConfig,
    catalog_hash: str = "",
) -> tuple[scorer.Checkpoint, TrainReport]:
    """Deterministic training run; same entries + config give identical bytes."""
    config.validate()
    entries = list(entries)
    if not entries:
        raise EmptyDataset("cannot train on an empty dataset")
    started = time.perf_counter()

    # validation split is by query so one query's pairs never straddle it
    split_rng = np.random.default_rng([config.seed, 1])
    order = sorted(range(len(entries)), key=lambda i: entries[i].query_id)
    n_val = int(round(config.validation_fraction * len(entries)))
    n_val = min(len(entries) - 1, max(1, n_val)) if len(entries) > 1 else 0
    val_positions = set(
        split_rng.choice(len(order), size=n_val, replace=False).tolist()
    )
    train_entries = [entries[order[i]] for i in range(len(order)) if i not in val_positions]
    val_entries = [entries[order[i]] for i in sorted(val_positions)]
    if not val_entries:
        val_entries = train_entries  # single-query dataset; degenerate but defined

    scaler = plan_ir.fit_scaler(
        c.plan for entry in train_entries for c in entry.candidates
    )
    params = scorer.init_params(config.seed, scaler=scaler, catalog_hash=catalog_hash)
    flat = params.params_dict()
    state = nn.AdamState.for_params(flat)

    train_tensors = _encode_tensors(train_entries, scaler)
    val_tensors = _encode_tensors(val_entries, scaler)
    samples = build_samples(train_entries, config.mode)
    samples_meta = (
        [ranked_candidate_order(e) for e in train_entries]
        if config.mode == "listwise"
        else None
    )

    shuffle_rng = np.random.default_rng([config.seed, 2])
    best_train = np.inf
    stale_epochs = 0
    best_val = np.inf
    best_epoch = 0
    best_params: Optional[scorer.ScorerParams] = None
    train_losses: list[float] = []
    val_metrics: list[float] = []

    for epoch in range(1, config.max_epochs + 1):
        if config.shuffle:
            epoch_order = shuffle_rng.permutation(len(samples))
        else:
            epoch_order = np.arange(len(samples))
        total_loss = 0.0
        total_weight = 0
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in epoch_order[start : start + config.batch_size]]
            try:
                loss, grads = _batch_loss_and_grads(
                    params, config.mode, batch, samples_meta, train_tensors
                )
            except NonFiniteGradient as exc:
                raise NonFiniteLoss(
                    f"epoch {epoch}: gradients diverged ({exc})"
                ) from exc
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: training loss is {loss}")
            nn.adam_step(flat, grads, state, config.learning_rate)
            total_loss += loss * len(batch)
            total_weight += len(batch)
        epoch_loss = total_loss / max(1, total_weight)
        train_losses.append(epoch_loss)

        metric = _selected_latency_total(params, val_entries, val_tensors)
        val_metrics.append(metric)
        if metric < best_val:
            best_val = metric
            best_epoch = epoch
            best_params = params.copy()

        if epoch_loss < best_train:
            best_train = epoch_loss
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.early_stop_patience:
                break

    assert best_params is not None
    checkpoint = scorer.Checkpoint(
        params=best_params,
        mode=config.mode,
        config_digest=config.digest(),
        best_validation=best_val,
    )
    report = TrainReport(
        mode=config.mode,
        train_losses=train_losses,
        validation_metrics=val_metrics,
        best_epoch=best_epoch,
        wall_seconds=time.perf_counter() - started,
        num_queries=len(entries),
        num_train_queries=len(train_entries),
        num_validation_queries=len(val_entries) if n_val else 0,
        num_samples=len(samples),
    )
    return checkpoint, report
