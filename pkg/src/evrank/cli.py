"""Command-line interface: retrieve, rerank, score, filter, eval.

Every command reads one JSON config file, applies command-line overrides,
and stamps the resulting config hash into each output record. With
scripted or replay policies all commands are deterministic: identical
inputs, config, and seed produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import backends, eapo, records
from ._version import ENGINE_VERSION
from .config import (
    ConfigError,
    EngineConfig,
    PolicyConfig,
    RerankConfig,
    load_config,
)
from .episode import ReplayDivergenceError, replay_episode, run_episode
from .metrics import QueryResult, parse_metric
from .protocol import load_template
from .rerank import plan_windows, rerank_sliding
from .store import (
    EmbeddingFormatError,
    ManifestError,
    Pool,
    Query,
    attach_query_embeddings,
    cosine_topk,
    ingest_manifest,
    load_embeddings,
    load_query_manifest,
)

log = logging.getLogger("evrank")

_USAGE_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evrank",
        description="Agentic reranking engine for multimodal retrieval",
    )
    parser.add_argument("--version", action="version", version=ENGINE_VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--pool", help="candidate manifest path (overrides config)")
        p.add_argument("--queries", help="query manifest path (overrides config)")
        p.add_argument("--k-top", type=int, dest="k_top", help="first-stage depth")
        p.add_argument("--window", type=int, help="rerank window size")
        p.add_argument("--stride", type=int, help="rerank window stride")
        p.add_argument(
            "--policy",
            help="policy backend: scripted:<path>, replay:<path>, or http",
        )
        p.add_argument("--out", help="output file path")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument(
            "--parallel", type=int, help="bounded worker count over queries"
        )
        p.add_argument(
            "--allow-partial",
            action="store_true",
            help="exit 0 even when some items failed",
        )
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("retrieve", help="first-stage cosine top-K retrieval")
    common(p)

    p = sub.add_parser("rerank", help="agentic sliding-window reranking")
    common(p)
    p.add_argument("--hits", required=True, help="hits file from retrieve")
    p.add_argument("--log-out", dest="log_out", help="trajectory log output path")

    p = sub.add_parser("score", help="reward and advantage scoring of a log")
    common(p)
    p.add_argument("--log", required=True, help="trajectory log to score")

    p = sub.add_parser("filter", help="rejection-sample a scored dataset")
    common(p)
    p.add_argument("--scored", required=True, help="scored dataset from score")
    p.add_argument("--report", help="optional path for the filter report JSON")

    p = sub.add_parser("eval", help="metrics over a rankings file")
    common(p)
    p.add_argument("--rankings", required=True, help="rankings file from rerank")

    return parser


def _parse_policy_flag(value: str) -> PolicyConfig:
    if value == "http":
        return PolicyConfig(kind="http")
    for prefix in ("scripted", "replay"):
        if value.startswith(prefix + ":"):
            path = value[len(prefix) + 1 :]
            if not path:
                raise ConfigError(f"--policy {prefix}: requires a path")
            return PolicyConfig(kind=prefix, path=path)
    raise ConfigError(
        f"bad --policy {value!r}: expected scripted:<path>, replay:<path>, or http"
    )


def _effective_config(args) -> EngineConfig:
    config = load_config(args.config) if args.config else EngineConfig()
    replacements = {}
    if args.pool:
        replacements["pool_manifest"] = args.pool
    if args.queries:
        replacements["query_manifest"] = args.queries
    if args.seed is not None:
        replacements["seed"] = args.seed
    if args.parallel is not None:
        if args.parallel < 1:
            raise ConfigError("--parallel must be at least 1")
        replacements["parallelism"] = args.parallel
    rerank_fields = {}
    if args.k_top is not None:
        rerank_fields["k_top"] = args.k_top
    if args.window is not None:
        rerank_fields["window"] = args.window
    if args.stride is not None:
        rerank_fields["stride"] = args.stride
    if rerank_fields:
        base = config.rerank
        replacements["rerank"] = RerankConfig(
            k_top=rerank_fields.get("k_top", base.k_top),
            window=rerank_fields.get("window", base.window),
            stride=rerank_fields.get("stride", base.stride),
            retries=base.retries,
        )
    if getattr(args, "policy", None):
        override = _parse_policy_flag(args.policy)
        base = config.policy
        replacements["policy"] = PolicyConfig(
            kind=override.kind,
            path=override.path,
            endpoint=base.endpoint,
            model=base.model,
            temperature=base.temperature,
            max_output_tokens=base.max_output_tokens,
            auth_token_env=base.auth_token_env,
            retries=base.retries,
            observation_role=base.observation_role,
        )
    if replacements:
        import dataclasses

        config = dataclasses.replace(config, **replacements)
    return config


def _out_path(args, config: EngineConfig, default_name: str, attr: str = "out") -> Path:
    given = getattr(args, attr, None)
    path = Path(given) if given else Path(config.output_dir) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _load_pool(config: EngineConfig, need_embeddings: bool) -> Pool:
    if not config.pool_manifest:
        raise ConfigError("no pool manifest configured (set --pool or config)")
    with open(config.pool_manifest, "rb") as f:
        pool = ingest_manifest(f)
    if need_embeddings:
        if not config.pool_embeddings:
            raise ConfigError("no pool embeddings configured")
        with open(config.pool_embeddings, "rb") as f:
            pool.attach_embeddings(load_embeddings(f))
    return pool


def _load_queries(config: EngineConfig, need_embeddings: bool) -> list[Query]:
    if not config.query_manifest:
        raise ConfigError("no query manifest configured (set --queries or config)")
    with open(config.query_manifest, "rb") as f:
        queries = load_query_manifest(f)
    if need_embeddings:
        if not config.query_embeddings:
            raise ConfigError("no query embeddings configured")
        with open(config.query_embeddings, "rb") as f:
            attach_query_embeddings(queries, load_embeddings(f))
    return queries


def _exit_for_failures(failures: int, args) -> int:
    if failures and not args.allow_partial:
        log.error("%d item(s) failed", failures)
        return 1
    if failures:
        log.warning("%d item(s) failed (--allow-partial set)", failures)
    return 0


# ---------------------------------------------------------------------------
# retrieve
# ---------------------------------------------------------------------------

def cmd_retrieve(args) -> int:
    config = _effective_config(args)
    config_hash = config.config_hash()
    pool = _load_pool(config, need_embeddings=True)
    queries = _load_queries(config, need_embeddings=True)
    out = _out_path(args, config, "hits.jsonl")
    rows = []
    for query in queries:
        hits = cosine_topk(query.embedding, pool, config.rerank.k_top)
        rows.append(records.hits_to_record(query.id, hits, config_hash))
    records.write_jsonl(out, rows)
    log.info("wrote %d hit records to %s", len(rows), out)
    return 0


# ---------------------------------------------------------------------------
# rerank
# ---------------------------------------------------------------------------

def _make_runner(config: EngineConfig, template, replay_records=None):
    role = config.policy.observation_role
    limits = config.limits
    if config.policy.kind == "replay":
        cursors: dict[str, int] = {}

        def replay_runner(query, window, window_index):
            per_query = replay_records.get(query.id, [])
            cursor = cursors.get(query.id, 0)
            if cursor >= len(per_query):
                raise ReplayDivergenceError(
                    f"no recorded episode for query {query.id!r} window {window_index}"
                )
            cursors[query.id] = cursor + 1
            return replay_episode(
                per_query[cursor],
                query,
                window,
                limits=limits,
                template=template,
                observation_role=role,
            )

        return replay_runner

    if config.policy.kind == "scripted":
        if not config.policy.path:
            raise ConfigError("scripted policy needs a path")
        backend = backends.load_scripted(config.policy.path)
    elif config.policy.kind == "http":
        if not config.policy.endpoint:
            raise ConfigError("http policy needs policy.endpoint in the config")
        backend = backends.HttpBackend(
            endpoint=config.policy.endpoint,
            model=config.policy.model,
            temperature=config.policy.temperature,
            max_output_tokens=config.policy.max_output_tokens,
            auth_token_env=config.policy.auth_token_env,
            retries=config.policy.retries,
            timeout=config.limits.turn_timeout,
            seed=config.seed,
        )
    else:
        raise ConfigError(f"unknown policy kind {config.policy.kind!r}")

    def runner(query, window, window_index):
        return run_episode(
            query,
            window,
            backend,
            limits=limits,
            template=template,
            observation_role=role,
            window_index=window_index,
        )

    return runner


def cmd_rerank(args) -> int:
    config = _effective_config(args)
    config_hash = config.config_hash()
    pool = _load_pool(config, need_embeddings=False)
    queries = {q.id: q for q in _load_queries(config, need_embeddings=False)}
    template = load_template(config.templates.system, config.templates.user)

    hit_rows = [
        records.hits_from_record(r, line)
        for line, r in enumerate(records.read_jsonl(args.hits), start=1)
    ]
    replay_records = None
    if config.policy.kind == "replay":
        if not config.policy.path:
            raise ConfigError("replay policy needs a path")
        replay_records = {}
        for record in records.read_jsonl(config.policy.path):
            replay_records.setdefault(record["query_id"], []).append(record)
    runner = _make_runner(config, template, replay_records)

    def one(item):
        query_id, hits = item
        query = queries.get(query_id)
        if query is None:
            return None, (query_id, hits, f"unknown query id {query_id!r}")
        try:
            plan = plan_windows(
                len(hits), config.rerank.window, config.rerank.stride
            )
            ranking = rerank_sliding(
                query, hits, pool, runner, plan, retries=config.rerank.retries
            )
            return ranking, None
        except Exception as exc:
            return None, (query_id, hits, str(exc))

    if config.parallelism > 1 and config.policy.kind != "replay":
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.parallelism) as executor:
            results = list(executor.map(one, hit_rows))
    else:
        # Replay cursors are per-query sequential state; keep them single
        # threaded rather than racing workers over the log.
        results = [one(item) for item in hit_rows]

    ranking_rows = []
    log_rows = []
    failures = 0
    for ranking, error in results:
        if error is not None:
            query_id, hits, message = error
            failures += 1
            order = [h.candidate_id for h in hits]
            ranking_rows.append(
                {
                    "query_id": query_id,
                    "input_order": order,
                    "final_order": order,
                    "window_answers": [],
                    "window_flags": [],
                    "failed": True,
                    "error": message,
                    "config_hash": config_hash,
                }
            )
            continue
        if ranking.failed:
            failures += 1
        row = records.ranking_to_record(ranking, config_hash)
        row["error"] = None
        ranking_rows.append(row)
        log_rows.extend(
            records.trajectory_to_record(t, config_hash) for t in ranking.trajectories
        )

    out = _out_path(args, config, "rankings.jsonl")
    log_out = _out_path(args, config, "trajectories.jsonl", attr="log_out")
    records.write_jsonl(out, ranking_rows)
    records.write_jsonl(log_out, log_rows)
    log.info(
        "wrote %d rankings to %s and %d trajectories to %s",
        len(ranking_rows),
        out,
        len(log_rows),
        log_out,
    )
    return _exit_for_failures(failures, args)


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------

def _relevant_positions(window_ids, gt_ids) -> list[int]:
    return [i for i, cid in enumerate(window_ids, start=1) if cid in gt_ids]


def _pick_gt_position(view: records.TrajectoryView, positions: list[int]) -> int | None:
    if not positions:
        return None
    if view.answer is None:
        return positions[0]
    # Best-ranked relevant position defines k when several are in window.
    return min(positions, key=lambda p: view.answer.index(p))


def cmd_score(args) -> int:
    config = _effective_config(args)
    config_hash = config.config_hash()
    queries = {q.id: q for q in _load_queries(config, need_embeddings=False)}

    groups: dict[str, list[dict]] = {}
    order: list[str] = []
    for record in records.read_jsonl(args.log):
        qid = record.get("query_id")
        if qid not in groups:
            groups[qid] = []
            order.append(qid)
        groups[qid].append(record)

    rows = []
    failures = 0
    for qid in order:
        group = groups[qid]
        query = queries.get(qid)
        if query is None:
            log.error("query %r from the log is not in the manifest", qid)
            failures += 1
            continue
        if len(group) < 2:
            log.warning(
                "query %r has %d trajectories; advantages need at least 2, skipping",
                qid,
                len(group),
            )
            failures += 1
            continue
        if len(group) != config.eapo.group_size:
            log.warning(
                "query %r group size %d differs from configured %d",
                qid,
                len(group),
                config.eapo.group_size,
            )
        breakdowns = []
        for record in group:
            view = records.TrajectoryView(record)
            positions = _relevant_positions(
                view.window_candidate_ids, query.gt_candidate_ids
            )
            gt_pos = _pick_gt_position(view, positions)
            breakdowns.append(eapo.reward_total(view, gt_pos, config.eapo))
        advantage_group = eapo.group_advantages(
            [b.total for b in breakdowns], config.eapo
        )
        for record, breakdown, advantage in zip(
            group, breakdowns, advantage_group.advantages
        ):
            record = dict(record)
            record["config_hash"] = config_hash
            rows.append(
                records.scored_row(
                    record,
                    breakdown,
                    group_id=qid,
                    advantage=advantage,
                    group_mean=advantage_group.mean,
                    group_std=advantage_group.std,
                )
            )

    out = _out_path(args, config, "scored.jsonl")
    records.write_jsonl(out, rows)
    log.info("wrote %d scored rows to %s", len(rows), out)
    return _exit_for_failures(failures, args)


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------

def cmd_filter(args) -> int:
    config = _effective_config(args)
    config_hash = config.config_hash()
    kept = []
    total = 0
    rejected_format = rejected_rank = rejected_both = 0
    for row in records.read_jsonl(args.scored):
        total += 1
        reward = row.get("reward") or {}
        format_ok = reward.get("r_format") == 1.0
        rank_ok = reward.get("gt_rank_k") == 1
        if format_ok and rank_ok:
            kept.append(row)
        elif not format_ok and not rank_ok:
            rejected_both += 1
        elif not format_ok:
            rejected_format += 1
        else:
            rejected_rank += 1

    out = _out_path(args, config, "kept.jsonl")
    records.write_jsonl(out, kept)
    report = {
        "total": total,
        "kept": len(kept),
        "keep_rate": (len(kept) / total) if total else 0.0,
        "rejected_format": rejected_format,
        "rejected_rank": rejected_rank,
        "rejected_both": rejected_both,
        "config_hash": config_hash,
    }
    if args.report:
        report_path = Path(args.report)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        records.write_jsonl(report_path, [report])
    print(
        f"kept {report['kept']}/{report['total']} rows "
        f"(keep rate {report['keep_rate']:.3f}); rejected: "
        f"{rejected_format} format, {rejected_rank} rank, {rejected_both} both"
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    config = _effective_config(args)
    config_hash = config.config_hash()
    queries = {q.id: q for q in _load_queries(config, need_embeddings=False)}
    metric_fns = {name: parse_metric(name) for name in config.eval.metrics}

    rows = []
    failures = 0
    for record in records.read_jsonl(args.rankings):
        qid = record.get("query_id")
        query = queries.get(qid)
        if query is None:
            raise ConfigError(f"rankings mention query {qid!r} not in the manifest")
        if not query.gt_candidate_ids:
            raise ConfigError(f"query {qid!r} has no ground-truth candidate ids")
        failed = bool(record.get("failed"))
        if failed:
            failures += 1
            zeros = {name: 0.0 for name in metric_fns}
            rows.append(
                {
                    "query_id": qid,
                    "metrics": dict(zeros),
                    "first_stage_metrics": dict(zeros),
                    "failed": True,
                    "config_hash": config_hash,
                }
            )
            continue
        final = QueryResult(
            query_id=qid,
            ranked_ids=tuple(record["final_order"]),
            relevant_ids=query.gt_candidate_ids,
        )
        first = QueryResult(
            query_id=qid,
            ranked_ids=tuple(record["input_order"]),
            relevant_ids=query.gt_candidate_ids,
        )
        rows.append(
            {
                "query_id": qid,
                "metrics": {name: fn(final) for name, fn in metric_fns.items()},
                "first_stage_metrics": {
                    name: fn(first) for name, fn in metric_fns.items()
                },
                "failed": False,
                "config_hash": config_hash,
            }
        )

    included = [
        r for r in rows if config.eval.count_failures_as_zero or not r["failed"]
    ]
    import math

    def mean_of(field: str, name: str) -> float:
        values = [r[field][name] for r in included]
        return math.fsum(values) / len(values) if values else 0.0

    summary = {
        "record": "summary",
        "num_queries": len(rows),
        "num_failed": failures,
        "means": {name: mean_of("metrics", name) for name in metric_fns},
        "first_stage_means": {
            name: mean_of("first_stage_metrics", name) for name in metric_fns
        },
        "engine_version": ENGINE_VERSION,
        "config_hash": config_hash,
    }
    out = _out_path(args, config, "eval.jsonl")
    records.write_jsonl(out, rows + [summary])

    width = max((len(n) for n in metric_fns), default=6)
    print(f"{'metric'.ljust(width)}  reranked  first-stage")
    for name in metric_fns:
        print(
            f"{name.ljust(width)}  "
            f"{summary['means'][name]:<8.4f}  "
            f"{summary['first_stage_means'][name]:<.4f}"
        )
    print(f"queries: {len(rows)}  failed: {failures}")
    return _exit_for_failures(failures, args)


# ---------------------------------------------------------------------------

_COMMANDS = {
    "retrieve": cmd_retrieve,
    "rerank": cmd_rerank,
    "score": cmd_score,
    "filter": cmd_filter,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _COMMANDS[args.command](args)
    except (
        ConfigError,
        ManifestError,
        EmbeddingFormatError,
        records.RecordError,
        ReplayDivergenceError,
        FileNotFoundError,
    ) as exc:
        log.error("%s", exc)
        return _USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
