"""Line-delimited JSON record schemas and IO for every pipeline artifact.

Records are written with sorted keys and compact separators so identical
runs produce identical bytes. Every record carries the config hash of the
run that produced it.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import IO, Iterable, Iterator

from .eapo import RewardBreakdown
from .episode import ToolOutcome, Trajectory, TrajectoryStep
from .protocol import TOOL_SELECT, ToolCall
from .rerank import GlobalRanking
from .store import RetrievalHit


class RecordError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def dump_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | Path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8", newline="\n") as sink:
        for record in records:
            sink.write(dump_record(record))
            sink.write("\n")


def read_jsonl(source: str | Path | IO) -> Iterator[dict]:
    if isinstance(source, (str, Path)):
        handle = open(source, "r", encoding="utf-8")
        close = True
    else:
        handle = source
        close = False
    try:
        for lineno, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise RecordError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(record, dict):
                raise RecordError("record must be a JSON object", lineno)
            yield record
    finally:
        if close:
            handle.close()


# ---------------------------------------------------------------------------
# Trajectory log records
# ---------------------------------------------------------------------------

def _encode_step(step: TrajectoryStep) -> dict:
    if step.kind == "reasoning":
        return {"kind": "reasoning", "text": step.text}
    if step.kind == "tool_call":
        call = step.tool_call
        if call.tool == TOOL_SELECT:
            return {
                "kind": "tool_call",
                "tool": call.tool,
                "indices": list(call.select_indices),
            }
        return {
            "kind": "tool_call",
            "tool": call.tool,
            "target": call.zoom_target,
            "bbox": list(call.bbox),
        }
    if step.kind == "observation":
        outcome = step.outcome
        return {
            "kind": "observation",
            "ok": outcome.ok,
            "tool": outcome.tool,
            "note": outcome.note,
            "labels": list(outcome.labels),
            "error": outcome.error,
        }
    return {"kind": "answer", "order": list(step.answer)}


def decode_step(record: dict) -> TrajectoryStep:
    kind = record.get("kind")
    if kind == "reasoning":
        return TrajectoryStep(kind="reasoning", text=record.get("text"))
    if kind == "tool_call":
        if record.get("tool") == TOOL_SELECT:
            call = ToolCall(
                tool=TOOL_SELECT, select_indices=tuple(record.get("indices", ()))
            )
        else:
            call = ToolCall(
                tool=record.get("tool", ""),
                zoom_target=record.get("target"),
                bbox=tuple(record.get("bbox", ())) or None,
            )
        return TrajectoryStep(kind="tool_call", tool_call=call)
    if kind == "observation":
        return TrajectoryStep(
            kind="observation",
            outcome=ToolOutcome(
                ok=bool(record.get("ok")),
                tool=record.get("tool", ""),
                note=record.get("note", ""),
                labels=tuple(record.get("labels", ())),
                error=record.get("error"),
            ),
        )
    if kind == "answer":
        return TrajectoryStep(kind="answer", answer=tuple(record.get("order", ())))
    raise RecordError(f"unknown step kind {kind!r}")


def trajectory_to_record(traj: Trajectory, config_hash: str) -> dict:
    return {
        "query_id": traj.query_id,
        "window_index": traj.window_index,
        "window_candidate_ids": list(traj.window_candidate_ids),
        "raw_turns": list(traj.raw_turns),
        "steps": [_encode_step(s) for s in traj.steps],
        "answer": list(traj.answer) if traj.answer is not None else None,
        "answer_raw": list(traj.answer_raw) if traj.answer_raw is not None else None,
        "tag_valid": traj.tag_valid,
        "list_valid": traj.list_valid,
        "n_tool_valid": traj.n_tool_valid,
        "turns_used": traj.turns_used,
        "failed": traj.failed,
        "failure_reason": traj.failure_reason,
        "timing": {
            "turn_seconds": [float(t) for t in traj.turn_seconds],
            "total_seconds": float(sum(traj.turn_seconds)),
        },
        "policy": traj.policy,
        "engine_version": traj.engine_version,
        "config_hash": config_hash,
    }


class TrajectoryView:
    """Duck-typed trajectory over a decoded log record, for the reward math."""

    def __init__(self, record: dict):
        self.record = record
        self.query_id = record["query_id"]
        self.window_candidate_ids = tuple(record["window_candidate_ids"])
        self.answer = (
            list(record["answer"]) if record.get("answer") is not None else None
        )
        self.tag_valid = bool(record.get("tag_valid"))
        self.list_valid = bool(record.get("list_valid"))
        self.n_tool_valid = int(record.get("n_tool_valid", 0))
        self.failed = bool(record.get("failed"))


# ---------------------------------------------------------------------------
# Hits, rankings, scored rows, eval rows
# ---------------------------------------------------------------------------

def hits_to_record(query_id: str, hits: list[RetrievalHit], config_hash: str) -> dict:
    return {
        "query_id": query_id,
        "hits": [
            {"candidate_id": h.candidate_id, "score": float(h.score)} for h in hits
        ],
        "config_hash": config_hash,
    }


def hits_from_record(record: dict, line: int | None = None) -> tuple[str, list[RetrievalHit]]:
    try:
        query_id = record["query_id"]
        hits = [
            RetrievalHit(candidate_id=h["candidate_id"], score=float(h["score"]))
            for h in record["hits"]
        ]
    except (KeyError, TypeError) as exc:
        raise RecordError(f"malformed hits record: {exc}", line) from None
    return query_id, hits


def ranking_to_record(ranking: GlobalRanking, config_hash: str) -> dict:
    return {
        "query_id": ranking.query_id,
        "input_order": list(ranking.input_order),
        "final_order": list(ranking.ordered_candidate_ids),
        "window_answers": [
            list(t.answer) if t.answer is not None else None
            for t in ranking.trajectories
        ],
        "window_flags": list(ranking.window_flags),
        "failed": ranking.failed,
        "config_hash": config_hash,
    }


def scored_row(
    log_record: dict,
    breakdown: RewardBreakdown,
    group_id: str,
    advantage: float,
    group_mean: float,
    group_std: float,
) -> dict:
    row = dict(log_record)
    row["reward"] = {
        "r_format": breakdown.r_format,
        "r_rank": breakdown.r_rank,
        "r_tool": breakdown.r_tool,
        "total": breakdown.total,
        "gt_rank_k": breakdown.gt_rank_k,
        "n_tool": breakdown.n_tool,
    }
    row["group_id"] = group_id
    row["advantage"] = advantage
    row["group_mean"] = group_mean
    row["group_std"] = group_std
    return row
