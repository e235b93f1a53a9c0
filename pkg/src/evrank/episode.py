"""The reranking episode loop.

One episode runs a policy over a window of candidates until it either emits
a valid rank list or exhausts its turn budget. Each policy turn appends a
reasoning step; a turn carrying a valid tool call additionally appends a
tool_call step and exactly one observation step (success or error), and a
turn carrying a valid answer appends the terminating answer step. Turns
that parse as neither degrade to reasoning-only steps, so the step sequence
always matches::

    (reasoning (tool_call observation)*)* reasoning? answer?

Raw turns are logged verbatim, which is what makes byte-exact replay
possible later.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

from ._version import ENGINE_VERSION
from .backends import PolicyBackend, ReplayBackend
from .protocol import (
    Message,
    MessageSequence,
    ParsedTurn,
    PromptTemplate,
    TextPart,
    ImagePart,
    ToolCall,
    load_template,
    normalize_ranklist,
    parse_turn,
    render_prompt,
)
from .store import Candidate, Query
from .tools import Observation, ToolError, execute


class ReplayDivergenceError(Exception):
    """A replayed episode did not reproduce the recorded trajectory."""


@dataclass(frozen=True)
class EpisodeLimits:
    max_turns: int = 6
    max_tool_calls: int = 4
    turn_timeout: float = 60.0

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be at least 1")
        if self.max_tool_calls < 0:
            raise ValueError("max_tool_calls must be nonnegative")
        if self.turn_timeout <= 0:
            raise ValueError("turn_timeout must be positive")


@dataclass(frozen=True)
class ToolOutcome:
    """Log-friendly record of one tool execution (no image payloads)."""

    ok: bool
    tool: str
    note: str = ""
    labels: tuple[str, ...] = ()
    error: str | None = None


@dataclass(frozen=True)
class TrajectoryStep:
    kind: str  # reasoning | tool_call | observation | answer
    text: str | None = None
    tool_call: ToolCall | None = None
    outcome: ToolOutcome | None = None
    answer: tuple[int, ...] | None = None


@dataclass
class Trajectory:
    query_id: str
    window_candidate_ids: tuple[str, ...]
    steps: list[TrajectoryStep] = field(default_factory=list)
    answer: list[int] | None = None
    answer_raw: tuple[int, ...] | None = None
    tag_valid: bool = False
    list_valid: bool = False
    n_tool_valid: int = 0
    turns_used: int = 0
    raw_turns: list[str] = field(default_factory=list)
    turn_seconds: list[float] = field(default_factory=list)
    failed: bool = False
    failure_reason: str | None = None
    policy: str = ""
    window_index: int = 0
    engine_version: str = ENGINE_VERSION


def _observation_message(
    role: str, observation: Observation | None, error: ToolError | None
) -> Message:
    if error is not None:
        return Message(role=role, parts=(TextPart(f"tool error: {error}"),))
    parts: list[TextPart | ImagePart] = [TextPart(observation.note)]
    parts.extend(
        ImagePart(data=img.data, media_type=img.media_type, label=img.label)
        for img in observation.images
    )
    return Message(role=role, parts=tuple(parts))


def run_episode(
    query: Query,
    window: Sequence[Candidate],
    policy: PolicyBackend,
    limits: EpisodeLimits = EpisodeLimits(),
    template: PromptTemplate | None = None,
    observation_role: str = "user",
    window_index: int = 0,
) -> Trajectory:
    """Run one episode and return its trajectory. Never raises on policy
    misbehavior; backend transport failures mark the trajectory failed."""
    window = list(window)
    ids = [c.id for c in window]
    if len(set(ids)) != len(ids):
        raise ValueError("window contains duplicate candidates")
    if template is None:
        template = load_template()

    traj = Trajectory(
        query_id=query.id,
        window_candidate_ids=tuple(ids),
        policy=policy.identity,
        window_index=window_index,
    )
    messages: MessageSequence = render_prompt(query, window, template)
    w = len(window)
    per_turn_tag_valid: list[bool] = []

    for _ in range(limits.max_turns):
        started = time.perf_counter()
        try:
            raw = policy.next_turn(messages)
        except Exception as exc:
            traj.failed = True
            traj.failure_reason = f"policy backend failed: {exc}"
            break
        # Deterministic backends report zero so that logs are replayable
        # byte for byte.
        traj.turn_seconds.append(
            0.0 if policy.deterministic else time.perf_counter() - started
        )
        traj.raw_turns.append(raw)
        traj.turns_used += 1
        messages.append(Message(role="assistant", parts=(TextPart(raw),)))

        parsed: ParsedTurn = parse_turn(raw, w)
        per_turn_tag_valid.append(parsed.tag_valid)
        traj.steps.append(TrajectoryStep(kind="reasoning", text=parsed.reasoning))

        if parsed.tool_call is not None:
            traj.steps.append(
                TrajectoryStep(kind="tool_call", tool_call=parsed.tool_call)
            )
            observation = None
            error = None
            if traj.n_tool_valid >= limits.max_tool_calls:
                error = ToolError(parsed.tool_call.tool, "tool call budget exhausted")
            else:
                try:
                    observation = execute(parsed.tool_call, window)
                    traj.n_tool_valid += 1
                except ToolError as exc:
                    error = exc
            if error is not None:
                outcome = ToolOutcome(
                    ok=False, tool=error.tool, error=error.reason
                )
            else:
                outcome = ToolOutcome(
                    ok=True,
                    tool=parsed.tool_call.tool,
                    note=observation.note,
                    labels=tuple(img.label for img in observation.images),
                )
            traj.steps.append(TrajectoryStep(kind="observation", outcome=outcome))
            messages.append(
                _observation_message(observation_role, observation, error)
            )
        elif parsed.answer is not None:
            traj.steps.append(TrajectoryStep(kind="answer", answer=parsed.answer))
            traj.answer_raw = parsed.answer
            traj.answer = normalize_ranklist(parsed.answer, w)
            traj.list_valid = True
            break
        # Neither action parsed: the turn stays a reasoning-only step.

    traj.tag_valid = bool(per_turn_tag_valid) and all(per_turn_tag_valid)
    return traj


def _step_signature(steps: Sequence[TrajectoryStep]) -> list[str]:
    return [s.kind for s in steps]


def replay_episode(
    record: dict,
    query: Query,
    window: Sequence[Candidate],
    limits: EpisodeLimits = EpisodeLimits(),
    template: PromptTemplate | None = None,
    observation_role: str = "user",
) -> Trajectory:
    """Re-run a logged episode through a replay backend and verify it.

    The record must carry verbatim raw_turns plus the window candidate ids;
    any mismatch between the re-derived trajectory and the recorded one is a
    ReplayDivergenceError.
    """
    version = record.get("engine_version")
    if version != ENGINE_VERSION:
        raise ReplayDivergenceError(
            f"log engine version {version!r} does not match {ENGINE_VERSION!r}"
        )
    recorded_ids = tuple(record["window_candidate_ids"])
    actual_ids = tuple(c.id for c in window)
    if recorded_ids != actual_ids:
        raise ReplayDivergenceError(
            f"window mismatch: log has {recorded_ids}, caller passed {actual_ids}"
        )
    backend = ReplayBackend(list(record["raw_turns"]), identity=str(record.get("policy", "replay:log")))
    traj = run_episode(
        query,
        window,
        backend,
        limits=limits,
        template=template,
        observation_role=observation_role,
        window_index=int(record.get("window_index", 0)),
    )
    if traj.failed:
        raise ReplayDivergenceError(f"replay failed: {traj.failure_reason}")
    if traj.raw_turns != list(record["raw_turns"]):
        raise ReplayDivergenceError("replay consumed a different turn sequence")
    checks = [
        ("answer", traj.answer, record.get("answer")),
        ("n_tool_valid", traj.n_tool_valid, record.get("n_tool_valid")),
        ("tag_valid", traj.tag_valid, record.get("tag_valid")),
        ("list_valid", traj.list_valid, record.get("list_valid")),
    ]
    recorded_steps = record.get("steps")
    if recorded_steps is not None:
        checks.append(
            (
                "steps",
                _step_signature(traj.steps),
                [s.get("kind") for s in recorded_steps],
            )
        )
    for name, actual, recorded in checks:
        if recorded is not None and actual != recorded:
            raise ReplayDivergenceError(
                f"replay diverged on {name}: got {actual!r}, log has {recorded!r}"
            )
    traj.policy = backend.identity
    return traj
