"""Policy backends: where each raw turn comes from.

A backend sees only the running message sequence and returns the next raw
turn as a string. Scripted backends recover window structure by scanning the
rendered candidate blocks, which keeps them usable behind the same contract
as a live model. Backends must be safe to share across episodes, so any
per-episode state is derived from the context (assistant-turn count) rather
than stored on the backend.
"""

from __future__ import annotations

import base64
import json
import re
from pathlib import Path
from typing import Callable, Protocol, runtime_checkable

from .protocol import CANDIDATE_BLOCK_RE, ImagePart, Message, MessageSequence, TextPart

TARGET_MARKER_RE = re.compile(r"target=(\S+)")


class BackendError(Exception):
    """Raised when a backend cannot produce a turn (transport failures)."""


class ReplayExhausted(BackendError):
    """A replay ran out of recorded turns before the episode finished."""


@runtime_checkable
class PolicyBackend(Protocol):
    identity: str
    deterministic: bool

    def next_turn(self, messages: MessageSequence) -> str: ...


def _turn_index(messages: MessageSequence) -> int:
    return sum(1 for m in messages if m.role == "assistant")


def _candidate_blocks(messages: MessageSequence) -> list[tuple[int, str]]:
    """(position, text) pairs from the latest user message with blocks."""
    for message in reversed(messages):
        if message.role != "user":
            continue
        blocks = [
            (int(num), text.strip())
            for num, text in CANDIDATE_BLOCK_RE.findall(message.text())
        ]
        if blocks:
            return blocks
    return []


def _answer_turn(order: list[int], note: str) -> str:
    listed = ", ".join(str(v) for v in order)
    return f"<think>{note}</think><answer>{listed}</answer>"


class IdentityBackend:
    """Always returns the window in its current order."""

    identity = "scripted:identity"
    deterministic = True

    def next_turn(self, messages: MessageSequence) -> str:
        blocks = _candidate_blocks(messages)
        if not blocks:
            return ""
        return _answer_turn(
            [pos for pos, _ in blocks], "keeping the presented order"
        )


class OracleBackend:
    """Ranks first whichever candidate block mentions the query's target.

    The query text must carry a ``target=<token>`` marker and the matching
    candidate's block text must contain that token. Positions without a
    match fall back to the identity order.
    """

    identity = "scripted:oracle"
    deterministic = True

    def next_turn(self, messages: MessageSequence) -> str:
        blocks = _candidate_blocks(messages)
        if not blocks:
            return ""
        target = None
        for message in messages:
            if message.role == "user":
                marker = TARGET_MARKER_RE.search(message.text())
                if marker:
                    target = marker.group(1)
                    break
        hit = None
        if target is not None:
            boundary = re.compile(
                rf"(?<![\w-]){re.escape(target)}(?![\w-])"
            )
            for pos, text in blocks:
                if boundary.search(text):
                    hit = pos
                    break
        if hit is None:
            return _answer_turn([blocks[0][0]], "no target found, keeping order")
        return _answer_turn([hit], f"candidate {hit} matches the target")


class FixedTurnsBackend:
    """Plays back a fixed turn list, one entry per assistant turn."""

    deterministic = True

    def __init__(self, turns: list[str], identity: str = "scripted:turns"):
        self.turns = list(turns)
        self.identity = identity

    def next_turn(self, messages: MessageSequence) -> str:
        i = _turn_index(messages)
        return self.turns[i] if i < len(self.turns) else ""


class CallableBackend:
    """Wraps a plain function; handy for tests and custom experiments."""

    def __init__(
        self,
        fn: Callable[[MessageSequence], str],
        identity: str = "scripted:callable",
        deterministic: bool = True,
    ):
        self._fn = fn
        self.identity = identity
        self.deterministic = deterministic

    def next_turn(self, messages: MessageSequence) -> str:
        return self._fn(messages)


class ReplayBackend:
    """Replays recorded raw turns verbatim; exhaustion is a hard error."""

    deterministic = True

    def __init__(self, turns: list[str], identity: str = "replay:memory"):
        self.turns = list(turns)
        self.identity = identity

    def next_turn(self, messages: MessageSequence) -> str:
        i = _turn_index(messages)
        if i >= len(self.turns):
            raise ReplayExhausted(
                f"replay has {len(self.turns)} turns, episode asked for turn {i + 1}"
            )
        return self.turns[i]


def load_scripted(path: str) -> PolicyBackend:
    """Build a scripted backend from a JSON policy file.

    Supported shapes: {"type": "identity"}, {"type": "oracle"},
    {"type": "turns", "turns": [...]}.
    """
    spec = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(spec, dict):
        raise ValueError("scripted policy file must hold a JSON object")
    kind = spec.get("type")
    if kind == "identity":
        return IdentityBackend()
    if kind == "oracle":
        return OracleBackend()
    if kind == "turns":
        turns = spec.get("turns")
        if not isinstance(turns, list) or not all(isinstance(t, str) for t in turns):
            raise ValueError("scripted turns policy needs a list of strings")
        return FixedTurnsBackend(turns, identity=f"scripted:turns:{Path(path).name}")
    raise ValueError(f"unknown scripted policy type {kind!r}")


# ---------------------------------------------------------------------------
# Live JSON-over-HTTP chat backend
# ---------------------------------------------------------------------------

def _encode_image(part: ImagePart) -> str:
    data = part.data if part.data is not None else Path(part.path).read_bytes()
    b64 = base64.b64encode(data).decode("ascii")
    return f"data:{part.media_type};base64,{b64}"


def to_chat_messages(messages: MessageSequence) -> list[dict]:
    """Convert a message sequence to role-tagged chat-completions dicts."""
    out = []
    for message in messages:
        if all(isinstance(p, TextPart) for p in message.parts):
            out.append({"role": message.role, "content": message.text()})
            continue
        content = []
        for part in message.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": _encode_image(part)},
                    }
                )
        out.append({"role": message.role, "content": content})
    return out


class HttpBackend:
    """Talks to a chat-completions style endpoint over JSON HTTP.

    The auth token is read from the environment variable named by
    ``auth_token_env`` at request time, never stored in config files.
    """

    deterministic = False

    def __init__(
        self,
        endpoint: str,
        model: str | None = None,
        temperature: float = 0.0,
        max_output_tokens: int = 1024,
        auth_token_env: str = "EVRANK_API_TOKEN",
        retries: int = 2,
        timeout: float = 60.0,
        seed: int | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens
        self.auth_token_env = auth_token_env
        self.retries = retries
        self.timeout = timeout
        self.seed = seed
        self.identity = f"http:{endpoint}" + (f"#{model}" if model else "")

    def next_turn(self, messages: MessageSequence) -> str:
        import os

        import requests

        payload = {
            "messages": to_chat_messages(messages),
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        }
        if self.model:
            payload["model"] = self.model
        if self.seed is not None:
            payload["seed"] = self.seed
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"

        last_error = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                if resp.status_code >= 500:
                    last_error = BackendError(f"server error {resp.status_code}")
                    continue
                resp.raise_for_status()
                body = resp.json()
                content = body["choices"][0]["message"]["content"]
                if isinstance(content, list):
                    content = "".join(
                        p.get("text", "") for p in content if isinstance(p, dict)
                    )
                if not isinstance(content, str):
                    raise BackendError("endpoint returned non-text content")
                return content
            except BackendError:
                raise
            except Exception as exc:
                last_error = exc
        raise BackendError(f"policy endpoint failed after retries: {last_error}")
