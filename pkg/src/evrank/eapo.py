"""Reward shaping, group-relative advantages, and the rejection filter.

The total reward for a trajectory is

    R = alpha * r_format + beta * r_rank + r_tool

with three components:

* r_format = 0.5 * [tags well-formed] + 0.5 * [answer list well-formed]
* r_rank   = exp(-(k - 1)^2 / (2 * sigma^2)) when the ground truth lands at
  rank k <= k_r of a valid answer, else 0
* r_tool   = eta * [k == 1] * [n_tool > 0] - rho * max(0, n_tool - tau_tol)

Advantages are group-relative: rewards are standardized within each group
of episodes for the same query using the population standard deviation,
floored at a small epsilon so an all-equal group yields all-zero
advantages. The surrogate objective is the unclipped mean of
ratio * advantage minus a KL penalty; it is a scalar evaluator only, no
gradients are involved.

k is always computed on the normalized (completed) rank list, so a partial
answer that omits the ground truth still receives a well-defined rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable


@dataclass(frozen=True)
class EapoConfig:
    alpha: float = 0.2
    beta: float = 0.8
    sigma: float = 1.0
    k_r: int = 5
    eta: float = 0.2
    rho: float = 0.1
    tau_tol: int = 1
    lambda_kl: float = 0.0
    group_size: int = 8
    std_epsilon: float = 1e-8

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.k_r < 1:
            raise ValueError("k_r must be at least 1")
        if self.tau_tol < 0:
            raise ValueError("tau_tol must be nonnegative")
        if self.group_size < 1:
            raise ValueError("group_size must be at least 1")
        if self.std_epsilon <= 0:
            raise ValueError("std_epsilon must be positive")


@runtime_checkable
class TrajectoryLike(Protocol):
    """The slice of a trajectory the reward math needs. Both live
    Trajectory objects and decoded log records satisfy it."""

    tag_valid: bool
    list_valid: bool
    answer: Sequence[int] | None
    n_tool_valid: int


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: float
    r_rank: float
    r_tool: float
    total: float
    gt_rank_k: int | None
    n_tool: int


def reward_format(traj: TrajectoryLike) -> float:
    """Half credit each for well-formed tags and a well-formed answer list."""
    return 0.5 * float(bool(traj.tag_valid)) + 0.5 * float(bool(traj.list_valid))


def rank_decay(k: int, config: EapoConfig) -> float:
    """Gaussian decay over the ground-truth rank: exp(-(k-1)^2 / (2 sigma^2))."""
    if k < 1:
        raise ValueError("rank k is 1-based")
    if k > config.k_r:
        return 0.0
    return math.exp(-((k - 1) ** 2) / (2.0 * config.sigma**2))


def rank_of_ground_truth(
    answer: Sequence[int] | None, gt_window_pos: int
) -> int | None:
    """1-based rank of the ground-truth window position in an answer list."""
    if answer is None:
        return None
    try:
        return list(answer).index(gt_window_pos) + 1
    except ValueError:
        return None


def reward_rank(
    answer: Sequence[int] | None, gt_window_pos: int, config: EapoConfig
) -> float:
    """Rank reward for one answer; 0 when the answer is absent or the
    ground truth falls outside the top k_r."""
    if gt_window_pos < 1:
        raise ValueError("gt_window_pos is 1-based")
    k = rank_of_ground_truth(answer, gt_window_pos)
    if k is None:
        return 0.0
    return rank_decay(k, config)


def reward_tool(n_tool: int, k: int | None, config: EapoConfig) -> float:
    """Bonus for evidence-backed top-1 hits, penalty for tool overuse."""
    if n_tool < 0:
        raise ValueError("n_tool must be nonnegative")
    bonus = config.eta if (k == 1 and n_tool > 0) else 0.0
    penalty = config.rho * max(0, n_tool - config.tau_tol)
    return bonus - penalty


def reward_total(
    traj: TrajectoryLike, gt_window_pos: int | None, config: EapoConfig
) -> RewardBreakdown:
    """Score one trajectory against the ground-truth window position.

    gt_window_pos may be None when no relevant candidate sits in the
    window; the rank reward and the tool bonus are then zero while the
    overuse penalty still applies.
    """
    if gt_window_pos is not None and gt_window_pos < 1:
        raise ValueError("gt_window_pos is 1-based")
    r_format = reward_format(traj)
    k = (
        rank_of_ground_truth(traj.answer, gt_window_pos)
        if gt_window_pos is not None
        else None
    )
    r_rank = rank_decay(k, config) if k is not None else 0.0
    n_tool = int(traj.n_tool_valid)
    r_tool = reward_tool(n_tool, k, config)
    total = config.alpha * r_format + config.beta * r_rank + r_tool
    return RewardBreakdown(
        r_format=r_format,
        r_rank=r_rank,
        r_tool=r_tool,
        total=total,
        gt_rank_k=k,
        n_tool=n_tool,
    )


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    mean: float
    std: float


def group_advantages(rewards: Sequence[float], config: EapoConfig) -> AdvantageGroup:
    """Standardize rewards within one group.

    A_i = (R_i - mean(R)) / max(std(R), epsilon), population std. An
    all-equal group comes out as all zeros.
    """
    n = len(rewards)
    if n < 2:
        raise ValueError("advantages need at least 2 rewards")
    values = [float(r) for r in rewards]
    mean = math.fsum(values) / n
    variance = math.fsum((v - mean) ** 2 for v in values) / n
    std = math.sqrt(variance)
    denom = max(std, config.std_epsilon)
    advantages = tuple((v - mean) / denom for v in values)
    return AdvantageGroup(
        rewards=tuple(values), advantages=advantages, mean=mean, std=std
    )


def eapo_objective(
    ratios: Sequence[float],
    advantages: Sequence[float],
    kl: float,
    config: EapoConfig,
) -> float:
    """Scalar surrogate objective: mean(ratio * advantage) - lambda * kl.

    Unclipped by design; this evaluates a candidate update, it does not
    differentiate anything.
    """
    if len(ratios) != len(advantages):
        raise ValueError("ratios and advantages must have equal length")
    if not ratios:
        raise ValueError("objective needs at least one sample")
    for r in ratios:
        if r <= 0:
            raise ValueError("likelihood ratios must be positive")
    mean_term = math.fsum(r * a for r, a in zip(ratios, advantages)) / len(ratios)
    return mean_term - config.lambda_kl * float(kl)


@dataclass(frozen=True)
class FilterReport:
    total: int
    kept: int
    keep_rate: float
    rejected_format: int
    rejected_rank: int
    rejected_both: int


def rsft_filter(
    items: Sequence[tuple[TrajectoryLike, int | None]], config: EapoConfig
) -> tuple[list[tuple[TrajectoryLike, int | None]], FilterReport]:
    """Keep only trajectories that are fully well-formed and rank the
    ground truth first (r_format == 1 and k == 1).

    Returns the kept items and a report with the keep rate and rejection
    reasons. Deterministic and idempotent: filtering a filtered set keeps
    everything.
    """
    kept = []
    rejected_format = rejected_rank = rejected_both = 0
    for traj, gt_window_pos in items:
        breakdown = reward_total(traj, gt_window_pos, config)
        format_ok = breakdown.r_format == 1.0
        rank_ok = breakdown.gt_rank_k == 1
        if format_ok and rank_ok:
            kept.append((traj, gt_window_pos))
        elif not format_ok and not rank_ok:
            rejected_both += 1
        elif not format_ok:
            rejected_format += 1
        else:
            rejected_rank += 1
    total = len(items)
    report = FilterReport(
        total=total,
        kept=len(kept),
        keep_rate=(len(kept) / total) if total else 0.0,
        rejected_format=rejected_format,
        rejected_rank=rejected_rank,
        rejected_both=rejected_both,
    )
    return kept, report
