"""Retrieval metrics and the end-to-end benchmark driver."""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .rerank import WindowPlan, WindowRunner, plan_windows, rerank_sliding
from .store import Pool, Query, cosine_topk

_METRIC_NAME_RE = re.compile(r"^(recall|map)@(\d+)$")


@dataclass(frozen=True)
class QueryResult:
    """A ranked id list plus the relevant set for one query."""

    query_id: str
    ranked_ids: tuple[str, ...]
    relevant_ids: frozenset[str]

    def __post_init__(self):
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise ValueError("ranked_ids contain duplicates")


def recall_at_k(result: QueryResult, k: int) -> float:
    """1.0 iff any relevant id appears in the first min(k, len) positions."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not result.relevant_ids:
        raise ValueError("relevant set is empty")
    head = result.ranked_ids[: min(k, len(result.ranked_ids))]
    return 1.0 if any(r in result.relevant_ids for r in head) else 0.0


def map_at_k(result: QueryResult, k: int) -> float:
    """Average precision truncated at k, normalized by min(|relevant|, k)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not result.relevant_ids:
        raise ValueError("relevant set is empty")
    hits = 0
    precision_sum = 0.0
    for i, cid in enumerate(result.ranked_ids[:k], start=1):
        if cid in result.relevant_ids:
            hits += 1
            precision_sum += hits / i
    return precision_sum / min(len(result.relevant_ids), k)


def parse_metric(name: str) -> Callable[[QueryResult], float]:
    """Turn a name like ``recall@5`` or ``map@5`` into a callable."""
    m = _METRIC_NAME_RE.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown metric {name!r} (expected recall@K or map@K)")
    kind, k = m.group(1), int(m.group(2))
    if k < 1:
        raise ValueError(f"metric cutoff must be positive in {name!r}")
    fn = recall_at_k if kind == "recall" else map_at_k
    return lambda result: fn(result, k)


@dataclass
class QueryRow:
    query_id: str
    metrics: dict[str, float]
    first_stage_metrics: dict[str, float]
    failed: bool = False
    error: str | None = None


@dataclass
class BenchmarkReport:
    rows: list[QueryRow]
    means: dict[str, float]
    first_stage_means: dict[str, float]
    metadata: dict = field(default_factory=dict)


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def run_benchmark(
    pool: Pool,
    queries: Sequence[Query],
    runner: WindowRunner,
    k_top: int,
    window: int,
    stride: int,
    metric_names: Sequence[str] = ("recall@1", "recall@5", "map@5"),
    count_failures_as_zero: bool = True,
    rerank_retries: int = 0,
    parallelism: int = 1,
    metadata: dict | None = None,
) -> BenchmarkReport:
    """Retrieve, rerank, and score every query; aggregate mean metrics.

    Queries that raise are recorded as failed rows; they count as zero in
    the means by default, or are excluded when count_failures_as_zero is
    False. Workers are bounded by ``parallelism``; rows keep query order
    either way.
    """
    metric_fns = {name: parse_metric(name) for name in metric_names}
    for q in queries:
        if not q.gt_candidate_ids:
            raise ValueError(f"query {q.id!r} has no ground-truth candidate ids")

    def one(query: Query) -> QueryRow:
        try:
            if query.embedding is None:
                raise ValueError(f"query {query.id!r} has no embedding")
            hits = cosine_topk(query.embedding, pool, k_top)
            plan = plan_windows(len(hits), window, stride)
            ranking = rerank_sliding(
                query, hits, pool, runner, plan, retries=rerank_retries
            )
            relevant = query.gt_candidate_ids
            final = QueryResult(
                query_id=query.id,
                ranked_ids=tuple(ranking.ordered_candidate_ids),
                relevant_ids=relevant,
            )
            first = QueryResult(
                query_id=query.id,
                ranked_ids=tuple(h.candidate_id for h in hits),
                relevant_ids=relevant,
            )
            if ranking.failed:
                # An episode failure anywhere scores the whole query zero.
                zeros = {name: 0.0 for name in metric_fns}
                return QueryRow(
                    query_id=query.id,
                    metrics=dict(zeros),
                    first_stage_metrics=dict(zeros),
                    failed=True,
                    error="episode failure",
                )
            return QueryRow(
                query_id=query.id,
                metrics={name: fn(final) for name, fn in metric_fns.items()},
                first_stage_metrics={
                    name: fn(first) for name, fn in metric_fns.items()
                },
                failed=False,
                error=None,
            )
        except Exception as exc:
            zeros = {name: 0.0 for name in metric_fns}
            return QueryRow(
                query_id=query.id,
                metrics=dict(zeros),
                first_stage_metrics=dict(zeros),
                failed=True,
                error=str(exc),
            )

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as executor:
            rows = list(executor.map(one, queries))
    else:
        rows = [one(q) for q in queries]

    included = (
        rows if count_failures_as_zero else [r for r in rows if not r.failed]
    )
    means = {
        name: _mean([r.metrics[name] for r in included]) for name in metric_fns
    }
    first_means = {
        name: _mean([r.first_stage_metrics[name] for r in included])
        for name in metric_fns
    }
    return BenchmarkReport(
        rows=rows,
        means=means,
        first_stage_means=first_means,
        metadata=dict(metadata or {}),
    )


def format_table(report: BenchmarkReport) -> str:
    """Human-readable summary table for stdout."""
    names = list(report.means)
    header = ["metric", "reranked", "first-stage"]
    body = [
        [name, f"{report.means[name]:.4f}", f"{report.first_stage_means[name]:.4f}"]
        for name in names
    ]
    widths = [
        max(len(row[i]) for row in [header] + body) for i in range(len(header))
    ]
    lines = [
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(header)),
        "  ".join("-" * widths[i] for i in range(len(header))),
    ]
    lines.extend(
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in body
    )
    failed = sum(1 for r in report.rows if r.failed)
    lines.append(f"queries: {len(report.rows)}  failed: {failed}")
    return "\n".join(lines)
