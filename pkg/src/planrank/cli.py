"""Command-line entry point wiring collection, training, and evaluation.

Subcommands: collect, split, train, rank, evaluate, spectrum, inspect.
Every failure maps to a distinct exit code and a machine-readable JSON
error line on stderr; checkpoints embed the catalog hash and scoring
commands refuse to run against a different catalog.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import datastore, evaluation, gateway, hints, scorer, trainer
from . import errors as err

EXIT_CODES = {
    err.MalformedDocument: 3,
    err.UnsupportedArity: 4,
    err.EmptyCorpus: 5,
    err.DuplicateHintSet: 6,
    err.InvalidHintSet: 7,
    err.MissingDefault: 8,
    err.DimensionMismatch: 9,
    err.ShapeMismatch: 10,
    err.NonFiniteGradient: 11,
    err.EmptyTree: 12,
    err.EmptyCandidates: 13,
    err.FormatVersionMismatch: 14,
    err.CorruptChecksum: 15,
    err.NonPositiveLatency: 16,
    err.EmptyList: 17,
    err.EmptyDataset: 18,
    err.NonFiniteLoss: 19,
    err.MissingLatency: 20,
    err.SchemaViolation: 21,
    err.MissingDefaultPlan: 22,
    err.InsufficientTemplates: 23,
    err.InsufficientQueriesPerTemplate: 24,
    err.DuplicateQueryId: 25,
    err.SqlError: 26,
    err.MissingRecord: 27,
    err.EmptyTestSet: 28,
    err.NonPositiveTotal: 29,
    err.TooFewPlans: 30,
    err.CatalogMismatch: 31,
}
IO_EXIT_CODE = 32
CONFIG_EXIT_CODE = 33


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planrank",
        description="Rank optimizer hint sets per query with a learned plan scorer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False, split=False):
        p.add_argument("--data", required=True, help="record file (JSONL)")
        p.add_argument("--catalog", help="hint catalog JSON; default: built-in 49")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if split:
            p.add_argument("--split", help="split file from the split command")

    p = sub.add_parser("collect", help="measure queries x hint sets against a DBMS")
    p.add_argument("--queries", required=True, help="JSON list of {query_id, template_id, sql}")
    p.add_argument("--catalog")
    p.add_argument("--out", required=True, help="record file to append to")
    p.add_argument("--db-host", default="localhost")
    p.add_argument("--db-port", type=int, default=5432)
    p.add_argument("--db-name", default="postgres")
    p.add_argument("--db-user", default="postgres")
    p.add_argument("--timeout-ms", type=int, default=300_000)
    p.add_argument("--repetitions", type=int, default=1)

    p = sub.add_parser("split", help="carve train/test query sets")
    add_common(p)
    p.add_argument("--scenario", choices=("adhoc", "repeat"), required=True)
    p.add_argument("--selection", choices=("rand", "slow"), required=True)
    p.add_argument("--holdout", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a scorer on recorded data")
    add_common(p, split=True)
    p.add_argument("--mode", choices=trainer.MODES)
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="training report path (default: <out>.report.json)")

    p = sub.add_parser("rank", help="score one query's recorded candidate plans")
    add_common(p, checkpoint=True)
    p.add_argument("--query-id", required=True)

    p = sub.add_parser("evaluate", help="speedup/regression report on a test set")
    add_common(p, checkpoint=True, split=True)
    p.add_argument("--out", help="write the full report JSON here")

    p = sub.add_parser("spectrum", help="embedding covariance spectrum")
    add_common(p, checkpoint=True, split=True)
    p.add_argument("--subset", choices=("train", "test", "all"), default="all")
    p.add_argument("--out", help="CSV path (k, sigma, log10_sigma)")
    p.add_argument("--json", dest="json_out", help="also write the report as JSON")

    p = sub.add_parser("inspect", help="dataset statistics")
    add_common(p)
    p.add_argument("--out", help="write statistics JSON here")

    return parser


def _load_catalog(path) -> hints.Catalog:
    if path is None:
        return hints.default_catalog()
    return hints.load_catalog(path)


def _load_entries(args, catalog) -> list[datastore.QueryEntry]:
    records = datastore.load_records(args.data)
    return datastore.group_queries(records, catalog)


def _apply_split(entries, split_path, side):
    if split_path is None:
        return entries
    split = datastore.load_split(split_path)
    ids = split.train_queries if side == "train" else split.test_queries
    return datastore.select_entries(entries, ids)


def _check_catalog(ckpt: scorer.Checkpoint, catalog: hints.Catalog) -> None:
    if ckpt.params.catalog_hash and ckpt.params.catalog_hash != catalog.hash():
        raise err.CatalogMismatch(
            "checkpoint was trained against a different hint catalog; "
            "pass the matching --catalog"
        )


def _cmd_collect(args) -> int:
    catalog = _load_catalog(args.catalog)
    queries_doc = json.loads(Path(args.queries).read_text(encoding="utf-8"))
    queries = [
        gateway.WorkloadQuery(q["query_id"], q["template_id"], q["sql"])
        for q in queries_doc
    ]
    config = gateway.DbConfig(
        host=args.db_host,
        port=args.db_port,
        database=args.db_name,
        user=args.db_user,
        timeout_ms=args.timeout_ms,
        repetitions=args.repetitions,
    )
    source = gateway.LiveSource(config)
    written = gateway.collect(source, queries, catalog, args.out)
    print(f"wrote {written} records to {args.out}")
    return 0


def _cmd_split(args) -> int:
    catalog = _load_catalog(args.catalog)
    entries = _load_entries(args, catalog)
    spec = datastore.ScenarioSpec(
        scenario=args.scenario,
        selection=args.selection,
        holdout=args.holdout,
        seed=args.seed,
    )
    split = datastore.make_split(entries, spec)
    datastore.save_split(split, args.out)
    print(
        f"{args.scenario}-{args.selection}: {len(split.train_queries)} train, "
        f"{len(split.test_queries)} test -> {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    catalog = _load_catalog(args.catalog)
    entries = _load_entries(args, catalog)
    entries = _apply_split(entries, args.split, "train")

    config_fields = {}
    if args.config:
        config_fields = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = trainer.TrainConfig.from_dict(config_fields)
    if args.mode:
        config.mode = args.mode
    if args.seed is not None:
        config.seed = args.seed

    checkpoint, report = trainer.train(entries, config, catalog_hash=catalog.hash())
    scorer.save(checkpoint, args.out)
    report_path = args.report or f"{args.out}.report.json"
    Path(report_path).write_text(report.to_json(), encoding="utf-8")
    print(
        f"{config.mode}: {len(report.train_losses)} epochs, best epoch "
        f"{report.best_epoch}, validation {checkpoint.best_validation:.3f} "
        f"-> {args.out}"
    )
    return 0


def _cmd_rank(args) -> int:
    catalog = _load_catalog(args.catalog)
    ckpt = scorer.load(args.checkpoint)
    _check_catalog(ckpt, catalog)
    entries = _load_entries(args, catalog)
    matches = [e for e in entries if e.query_id == args.query_id]
    if not matches:
        raise err.MissingRecord(f"query {args.query_id} not in {args.data}")
    entry = matches[0]

    encoded = evaluation.encode_entry(ckpt.params, entry)
    scores = scorer.score_trees(ckpt.params, encoded)
    winner = evaluation.model_selector(ckpt.params)(entry)
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    print(f"{'':2}{'score':>12}  {'latency_ms':>12}  hint sets")
    for i in order:
        cand = entry.candidates[i]
        mark = "*" if i == winner else " "
        ids = ",".join(str(h) for h in cand.hint_set_ids)
        print(f"{mark:2}{scores[i]:>12.6f}  {cand.latency:>12.3f}  [{ids}]")
    return 0


def _cmd_evaluate(args) -> int:
    catalog = _load_catalog(args.catalog)
    ckpt = scorer.load(args.checkpoint)
    _check_catalog(ckpt, catalog)
    entries = _load_entries(args, catalog)
    entries = _apply_split(entries, args.split, "test")
    report = evaluation.evaluate(ckpt.params, entries)
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    print(report.to_text())
    return 0


def _cmd_spectrum(args) -> int:
    catalog = _load_catalog(args.catalog)
    ckpt = scorer.load(args.checkpoint)
    _check_catalog(ckpt, catalog)
    entries = _load_entries(args, catalog)
    if args.subset != "all":
        if not args.split:
            raise err.EmptyTestSet("--subset train/test requires --split")
        entries = _apply_split(entries, args.split, args.subset)
    plans = [c.plan for e in entries for c in e.candidates]
    report = evaluation.embedding_spectrum(ckpt.params, plans)
    if args.out:
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
    if args.json_out:
        Path(args.json_out).write_text(report.to_json(), encoding="utf-8")
    top = ", ".join(f"{v:.3e}" for v in report.singular_values[:4])
    print(
        f"{report.num_embeddings} unique plans; collapsed dimensions "
        f"(sigma < {report.threshold:g}): {report.collapse_count}; top: {top}"
    )
    return 0


def _cmd_inspect(args) -> int:
    catalog = _load_catalog(args.catalog)
    entries = _load_entries(args, catalog)
    stats = datastore.plan_statistics(entries)
    if args.out:
        Path(args.out).write_text(
            json.dumps(stats, indent=2, sort_keys=True), encoding="utf-8"
        )
    width = max(len(k) for k in stats)
    for key, value in stats.items():
        shown = f"{value:.1f}" if isinstance(value, float) else value
        print(f"{key:<{width}}  {shown}")
    return 0


_COMMANDS = {
    "collect": _cmd_collect,
    "split": _cmd_split,
    "train": _cmd_train,
    "rank": _cmd_rank,
    "evaluate": _cmd_evaluate,
    "spectrum": _cmd_spectrum,
    "inspect": _cmd_inspect,
}


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except err.PlanRankError as exc:
        _emit_error(exc)
        return EXIT_CODES.get(type(exc), 1)
    except OSError as exc:
        _emit_error(exc)
        return IO_EXIT_CODE
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        _emit_error(exc)
        return CONFIG_EXIT_CODE


def _emit_error(exc: Exception) -> None:
    print(
        json.dumps({"error": type(exc).__name__, "message": str(exc)}),
        file=sys.stderr,
    )


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
