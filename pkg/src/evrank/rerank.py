"""Sliding-window rank aggregation over first-stage retrieval lists.

Windows are processed back to front: the tail window is reranked first and
its permutation is written into the working list, so strong candidates are
carried forward into the next (earlier) window. The head window is clamped
to [0, W) when the list length is not stride-aligned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .episode import Trajectory
from .store import Pool, Query, RetrievalHit

# An episode runner: (query, window candidates, window index) -> Trajectory.
WindowRunner = Callable[[Query, list, int], Trajectory]


@dataclass(frozen=True)
class WindowPlan:
    """Half-open index ranges over the working list, in processing order."""

    window: int
    stride: int
    ranges: tuple[tuple[int, int], ...]


def plan_windows(k_top: int, window: int, stride: int) -> WindowPlan:
    """Plan the window sweep for a list of k_top items.

    Ranges run from the tail toward the head, each ``window`` wide and
    ``stride`` apart; the final range is clamped to [0, window). A list no
    longer than one window yields the single range [0, k_top). The number
    of ranges is 1 + ceil((k_top - window) / stride) when k_top > window.
    """
    if k_top < 1:
        raise ValueError("k_top must be at least 1")
    if window < 1:
        raise ValueError("window must be at least 1")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    if stride > window:
        raise ValueError("stride must not exceed window")
    if k_top <= window:
        return WindowPlan(window=window, stride=stride, ranges=((0, k_top),))
    ranges = []
    start = k_top - window
    while start > 0:
        ranges.append((start, start + window))
        start -= stride
    ranges.append((0, window))
    expected = 1 + math.ceil((k_top - window) / stride)
    assert len(ranges) == expected
    return WindowPlan(window=window, stride=stride, ranges=tuple(ranges))


@dataclass
class GlobalRanking:
    query_id: str
    input_order: list[str]
    ordered_candidate_ids: list[str]
    trajectories: list[Trajectory] = field(default_factory=list)
    window_flags: list[str] = field(default_factory=list)  # ok|unanswered|failed

    @property
    def failed(self) -> bool:
        return any(flag == "failed" for flag in self.window_flags)


def _is_permutation(answer: list[int] | None, size: int) -> bool:
    return answer is not None and sorted(answer) == list(range(1, size + 1))


def rerank_sliding(
    query: Query,
    hits: Sequence[RetrievalHit],
    pool: Pool,
    runner: WindowRunner,
    plan: WindowPlan,
    retries: int = 0,
) -> GlobalRanking:
    """Carry-forward rerank of first-stage hits under a window plan.

    Each planned range is reranked in place by one episode. Windows whose
    episode fails or never answers are left unpermuted and flagged; the
    output is always a permutation of the input ids.
    """
    working = [hit.candidate_id for hit in hits]
    if len(set(working)) != len(working):
        raise ValueError("hits contain duplicate candidate ids")
    if plan.ranges and max(end for _, end in plan.ranges) > len(working):
        raise ValueError(
            f"plan expects at least {max(e for _, e in plan.ranges)} hits, "
            f"got {len(working)}"
        )

    result = GlobalRanking(
        query_id=query.id, input_order=list(working), ordered_candidate_ids=working
    )
    for window_index, (start, end) in enumerate(plan.ranges):
        window_ids = working[start:end]
        window = pool.window(window_ids)
        traj = runner(query, window, window_index)
        for _ in range(retries):
            if not traj.failed and traj.answer is not None:
                break
            traj = runner(query, window, window_index)
        result.trajectories.append(traj)
        if traj.failed:
            result.window_flags.append("failed")
            continue
        # Defensive: engines guarantee a normalized permutation, but the
        # global order must survive arbitrary episode output.
        if not _is_permutation(traj.answer, len(window_ids)):
            result.window_flags.append("unanswered")
            continue
        working[start:end] = [window_ids[p - 1] for p in traj.answer]
        result.window_flags.append("ok")
    return result
