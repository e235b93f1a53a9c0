"""Turn language: tagged segments, tool-call JSON, rank lists, prompts.

This module is the normative implementation of the protocol documented in
docs/protocol.md. A policy turn is text of the form::

    <think>free-form reasoning</think><tool_call>{...json...}</tool_call>
    <think>free-form reasoning</think><answer>3, 1, 2</answer>

``parse_turn`` is total: any string, including garbage, yields a ParsedTurn
with validity flags instead of an exception.

Validity is split into two independent flags:

* ``tag_valid``: exactly one well-nested <think> segment followed by exactly
  one <tool_call> or <answer> segment, with nothing but whitespace outside
  the tags. A turn carrying both a tool call and an answer is invalid.
* ``list_valid``: an <answer> segment exists and its body is a comma or
  whitespace separated list of distinct integers, each in [1, window_size].
  At least one integer is required.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .store import Candidate, Query

TOOL_SELECT = "select_image"
TOOL_ZOOM = "zoom_in"

# Candidate blocks rendered into user prompts. Scripted backends rely on this
# shape to recover window structure from the context alone.
CANDIDATE_BLOCK = "Candidate {index}:"
CANDIDATE_BLOCK_RE = re.compile(r"^Candidate (\d+):(.*)$", re.MULTILINE)

_TAG_TOKEN_RE = re.compile(r"</?(?:think|tool_call|answer)>")
_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
_TOOL_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)
_INT_RE = re.compile(r"\d+")
_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


class ProtocolError(ValueError):
    pass


class TemplateError(ProtocolError):
    """A prompt template has unresolved or unknown placeholders."""


@dataclass(frozen=True)
class ToolCall:
    """A parsed visual-tool invocation.

    select_image carries nonempty distinct 1-based ``select_indices``;
    zoom_in carries a 1-based ``zoom_target`` and a normalized ``bbox``
    (x0, y0, x1, y1) with 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1.
    """

    tool: str
    select_indices: tuple[int, ...] = ()
    zoom_target: int | None = None
    bbox: tuple[float, float, float, float] | None = None


@dataclass(frozen=True)
class ParsedTurn:
    reasoning: str | None = None
    tool_call: ToolCall | None = None
    answer: tuple[int, ...] | None = None
    tag_valid: bool = False
    list_valid: bool = False


def _parse_select(obj: dict) -> ToolCall | None:
    if set(obj) != {"tool", "indices"}:
        return None
    idx = obj["indices"]
    if not isinstance(idx, list) or not idx:
        return None
    out = []
    for v in idx:
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            return None
        out.append(v)
    if len(set(out)) != len(out):
        return None
    return ToolCall(tool=TOOL_SELECT, select_indices=tuple(out))


def _parse_zoom(obj: dict) -> ToolCall | None:
    if set(obj) != {"tool", "target", "bbox"}:
        return None
    target = obj["target"]
    if isinstance(target, bool) or not isinstance(target, int) or target < 1:
        return None
    bbox = obj["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4:
        return None
    vals = []
    for v in bbox:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return None
        vals.append(float(v))
    x0, y0, x1, y1 = vals
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        return None
    return ToolCall(tool=TOOL_ZOOM, zoom_target=target, bbox=(x0, y0, x1, y1))


def _parse_tool_body(body: str) -> ToolCall | None:
    try:
        obj = json.loads(body)
    except (json.JSONDecodeError, RecursionError):
        return None
    if not isinstance(obj, dict):
        return None
    tool = obj.get("tool")
    if tool == TOOL_SELECT:
        return _parse_select(obj)
    if tool == TOOL_ZOOM:
        return _parse_zoom(obj)
    return None


def parse_rank_body(body: str, window_size: int) -> tuple[int, ...] | None:
    """Parse an answer body into a rank list, or None if invalid.

    Accepts comma and whitespace separators. Entries must be distinct
    decimal integers in [1, window_size]; at least one is required.
    """
    tokens = [t for t in re.split(r"[\s,]+", body.strip()) if t]
    if not tokens or not all(_INT_RE.fullmatch(t) for t in tokens):
        return None
    values = [int(t) for t in tokens]
    if len(set(values)) != len(values):
        return None
    if any(not (1 <= v <= window_size) for v in values):
        return None
    return tuple(values)


def _grammar_ok(raw: str) -> bool:
    # Token stream must be exactly: <think> </think> <X> </X>, X an action,
    # with only whitespace outside the two segments.
    tokens = list(_TAG_TOKEN_RE.finditer(raw))
    if len(tokens) != 4:
        return False
    names = [t.group(0) for t in tokens]
    if names[0] != "<think>" or names[1] != "</think>":
        return False
    if names[2] not in ("<tool_call>", "<answer>"):
        return False
    if names[3] != names[2].replace("<", "</", 1):
        return False
    outside = (
        raw[: tokens[0].start()]
        + raw[tokens[1].end() : tokens[2].start()]
        + raw[tokens[3].end() :]
    )
    return outside.strip() == ""


def parse_turn(raw: str, window_size: int) -> ParsedTurn:
    """Total parser for a single policy turn. Never raises.

    When both a tool-call and an answer segment appear, the tool call takes
    precedence for extraction (and the turn is tag-invalid). list_valid is a
    pure predicate on the raw text, independent of tag structure.
    """
    if window_size < 1:
        raise ValueError("window_size must be at least 1")
    if not isinstance(raw, str):
        raw = str(raw)

    think_m = _THINK_RE.search(raw)
    tool_m = _TOOL_RE.search(raw)
    answer_m = _ANSWER_RE.search(raw)

    reasoning = think_m.group(1) if think_m else None
    answer_body = answer_m.group(1) if answer_m else None
    parsed_list = (
        parse_rank_body(answer_body, window_size) if answer_body is not None else None
    )
    list_valid = parsed_list is not None

    tool_call = None
    answer = None
    if tool_m is not None:
        tool_call = _parse_tool_body(tool_m.group(1))
    elif parsed_list is not None:
        answer = parsed_list

    return ParsedTurn(
        reasoning=reasoning,
        tool_call=tool_call,
        answer=answer,
        tag_valid=_grammar_ok(raw),
        list_valid=list_valid,
    )


def serialize_turn(turn: ParsedTurn) -> str:
    """Render a ParsedTurn back to tagged text. Requires one action."""
    if turn.reasoning is None:
        raise ProtocolError("cannot serialize a turn without reasoning")
    if (turn.tool_call is None) == (turn.answer is None):
        raise ProtocolError("turn must carry exactly one of tool_call or answer")
    parts = [f"<think>{turn.reasoning}</think>"]
    if turn.tool_call is not None:
        call = turn.tool_call
        if call.tool == TOOL_SELECT:
            body = {"tool": TOOL_SELECT, "indices": list(call.select_indices)}
        else:
            body = {
                "tool": TOOL_ZOOM,
                "target": call.zoom_target,
                "bbox": list(call.bbox),
            }
        parts.append(f"<tool_call>{json.dumps(body)}</tool_call>")
    else:
        parts.append(f"<answer>{', '.join(str(v) for v in turn.answer)}</answer>")
    return "".join(parts)


def normalize_ranklist(partial, window_size: int) -> list[int]:
    """Complete a partial rank list to a full permutation of 1..window_size.

    Listed positions keep their order; missing positions are appended in
    ascending order. Duplicates and out-of-range entries are errors.
    """
    if window_size < 1:
        raise ValueError("window_size must be at least 1")
    out = [int(v) for v in partial]
    if len(set(out)) != len(out):
        raise ValueError("rank list has duplicate entries")
    for v in out:
        if not (1 <= v <= window_size):
            raise ValueError(f"rank entry {v} out of range [1, {window_size}]")
    present = set(out)
    out.extend(v for v in range(1, window_size + 1) if v not in present)
    return out


# ---------------------------------------------------------------------------
# Prompt rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    """An image attachment slot: either a file path or inline bytes."""

    path: str | None = None
    data: bytes | None = None
    media_type: str = "image/png"
    label: str | None = None


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[TextPart | ImagePart, ...]

    def text(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))

    def image_parts(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]


MessageSequence = list[Message]

_KNOWN_PLACEHOLDERS = {"query_text", "num_candidates", "query_images", "candidates"}
_SLOT_RE = re.compile(r"(\{query_images\}|\{candidates\})")


@dataclass(frozen=True)
class PromptTemplate:
    """System and user prompt texts with named placeholders.

    The user template must contain {query_text} and {candidates};
    {num_candidates} and {query_images} are optional. Anything else inside
    {braces} made of lowercase letters or underscores is an error.
    """

    system: str
    user: str

    def __post_init__(self):
        for name, text in (("system", self.system), ("user", self.user)):
            for m in _PLACEHOLDER_RE.finditer(text):
                if m.group(1) not in _KNOWN_PLACEHOLDERS:
                    raise TemplateError(
                        f"unknown placeholder {{{m.group(1)}}} in {name} template"
                    )
        for required in ("{query_text}", "{candidates}"):
            if required not in self.user:
                raise TemplateError(f"user template is missing {required}")


def _default_template_text(name: str) -> str:
    return resources.files("evrank").joinpath(f"templates/{name}").read_text("utf-8")


def load_template(system_path: str | None = None, user_path: str | None = None) -> PromptTemplate:
    """Load template files, falling back to the packaged defaults."""
    system = (
        Path(system_path).read_text("utf-8")
        if system_path
        else _default_template_text("system.txt")
    )
    user = (
        Path(user_path).read_text("utf-8")
        if user_path
        else _default_template_text("user.txt")
    )
    return PromptTemplate(system=system, user=user)


def _media_type(path: str) -> str:
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in ("jpg", "jpeg"):
        return "image/jpeg"
    if suffix in ("png", "webp", "bmp", "gif"):
        return f"image/{suffix}"
    return "image/png"


def _image_part(path: str, label: str) -> ImagePart:
    if not Path(path).is_file():
        raise FileNotFoundError(f"image reference not found: {path}")
    return ImagePart(path=path, media_type=_media_type(path), label=label)


def _substitute(text: str, query_text: str, num_candidates: int) -> str:
    return text.replace("{query_text}", query_text).replace(
        "{num_candidates}", str(num_candidates)
    )


def render_prompt(
    query: Query, window: list[Candidate], template: PromptTemplate
) -> MessageSequence:
    """Build the initial message sequence for one reranking episode.

    One system message, then one user message interleaving the query text,
    query image slots, and 1-based numbered candidate blocks.
    """
    if not window:
        raise ValueError("window must contain at least one candidate")
    n = len(window)
    query_text = query.text or ""

    parts: list[TextPart | ImagePart] = []
    saw_query_images = "{query_images}" in template.user
    for piece in _SLOT_RE.split(template.user):
        if piece == "{query_images}":
            parts.extend(
                _image_part(ref, label="query") for ref in query.image_refs
            )
        elif piece == "{candidates}":
            if not saw_query_images and query.image_refs:
                # No explicit slot: query images sit just before the blocks.
                parts.extend(
                    _image_part(ref, label="query") for ref in query.image_refs
                )
            for i, cand in enumerate(window, start=1):
                header = CANDIDATE_BLOCK.format(index=i)
                if cand.text:
                    parts.append(TextPart(f"{header} {cand.text}\n"))
                else:
                    parts.append(TextPart(f"{header}\n"))
                if cand.image_ref is not None:
                    parts.append(_image_part(cand.image_ref, label=str(i)))
        elif piece:
            rendered = _substitute(piece, query_text, n)
            if rendered:
                parts.append(TextPart(rendered))

    return [
        Message(role="system", parts=(TextPart(_substitute(template.system, query_text, n)),)),
        Message(role="user", parts=tuple(parts)),
    ]
