"""Policy backends: scripted players, replay, chat-format conversion, HTTP."""

from __future__ import annotations

import json

import pytest

from evrank.backends import (
    BackendError,
    CallableBackend,
    FixedTurnsBackend,
    HttpBackend,
    IdentityBackend,
    OracleBackend,
    ReplayBackend,
    ReplayExhausted,
    load_scripted,
    to_chat_messages,
)
from evrank.protocol import (
    ImagePart,
    Message,
    TextPart,
    load_template,
    render_prompt,
)
from conftest import make_pool, make_target_query


def user(text: str) -> Message:
    return Message(role="user", parts=(TextPart(text),))


def assistant(text: str) -> Message:
    return Message(role="assistant", parts=(TextPart(text),))


def window_message(texts: list[str]) -> Message:
    body = "\n".join(
        f"Candidate {i}: {t}" for i, t in enumerate(texts, start=1)
    )
    return user(body)


class TestIdentityBackend:
    def test_answers_presented_order(self):
        turn = IdentityBackend().next_turn([window_message(["a", "b", "c"])])
        assert turn == (
            "<think>keeping the presented order</think><answer>1, 2, 3</answer>"
        )

    def test_no_blocks_yields_empty_turn(self):
        assert IdentityBackend().next_turn([user("hello")]) == ""
        assert IdentityBackend().next_turn([]) == ""

    def test_works_on_rendered_prompt(self):
        pool = make_pool(4)
        query = make_target_query(pool, 2)
        messages = render_prompt(query, pool.candidates, load_template())
        turn = IdentityBackend().next_turn(messages)
        assert "<answer>1, 2, 3, 4</answer>" in turn

    def test_attributes(self):
        backend = IdentityBackend()
        assert backend.identity == "scripted:identity"
        assert backend.deterministic is True


class TestOracleBackend:
    def test_ranks_marked_target_first(self):
        messages = [
            user("find target=beta in the corpus"),
            window_message(["alpha thing", "beta thing", "gamma thing"]),
        ]
        turn = OracleBackend().next_turn(messages)
        assert "<answer>2</answer>" in turn

    def test_token_boundary_rejects_prefixes(self):
        # cand-001 must not match inside cand-0010.
        messages = [
            user("find target=cand-001 here"),
            window_message(["item cand-0010", "item cand-001"]),
        ]
        turn = OracleBackend().next_turn(messages)
        assert "<answer>2</answer>" in turn

    def test_no_marker_keeps_first_position(self):
        turn = OracleBackend().next_turn([window_message(["a", "b"])])
        assert turn == (
            "<think>no target found, keeping order</think><answer>1</answer>"
        )

    def test_target_missing_from_window_keeps_first_position(self):
        messages = [
            user("find target=zeta in the corpus"),
            window_message(["alpha", "beta"]),
        ]
        assert "<answer>1</answer>" in OracleBackend().next_turn(messages)

    def test_reads_latest_window(self):
        messages = [
            user("find target=beta in the corpus"),
            window_message(["alpha", "beta"]),
            assistant("<think>looking</think><answer>2</answer>"),
            window_message(["beta", "alpha"]),
        ]
        assert "<answer>1</answer>" in OracleBackend().next_turn(messages)

    def test_end_to_end_on_rendered_prompt(self):
        pool = make_pool(6)
        query = make_target_query(pool, 4)
        messages = render_prompt(query, pool.candidates, load_template())
        assert "<answer>4</answer>" in OracleBackend().next_turn(messages)


class TestFixedTurnsBackend:
    def test_indexed_by_assistant_count(self):
        backend = FixedTurnsBackend(["first", "second"])
        assert backend.next_turn([user("go")]) == "first"
        assert backend.next_turn([user("go"), assistant("first")]) == "second"

    def test_exhausted_returns_empty(self):
        backend = FixedTurnsBackend(["only"])
        assert backend.next_turn([user("go"), assistant("only")]) == ""

    def test_identity_label(self):
        assert FixedTurnsBackend([], identity="scripted:x").identity == "scripted:x"


class TestReplayBackend:
    def test_replays_verbatim(self):
        backend = ReplayBackend(["turn-a", "turn-b"])
        assert backend.next_turn([user("go")]) == "turn-a"
        assert backend.next_turn([user("go"), assistant("turn-a")]) == "turn-b"

    def test_exhaustion_is_hard_error(self):
        backend = ReplayBackend(["only"])
        with pytest.raises(ReplayExhausted, match="1 turns.*turn 2"):
            backend.next_turn([user("go"), assistant("only")])

    def test_exhaustion_is_a_backend_error(self):
        assert issubclass(ReplayExhausted, BackendError)


class TestCallableBackend:
    def test_passthrough(self):
        backend = CallableBackend(lambda messages: f"saw {len(messages)}")
        assert backend.next_turn([user("a"), user("b")]) == "saw 2"
        assert backend.identity == "scripted:callable"
        assert backend.deterministic is True

    def test_custom_flags(self):
        backend = CallableBackend(lambda m: "", identity="x", deterministic=False)
        assert (backend.identity, backend.deterministic) == ("x", False)


class TestLoadScripted:
    def test_identity(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"type": "identity"}), "utf-8")
        assert isinstance(load_scripted(str(path)), IdentityBackend)

    def test_oracle(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"type": "oracle"}), "utf-8")
        assert isinstance(load_scripted(str(path)), OracleBackend)

    def test_turns(self, tmp_path):
        path = tmp_path / "policy.json"
        path.write_text(json.dumps({"type": "turns", "turns": ["a", "b"]}), "utf-8")
        backend = load_scripted(str(path))
        assert isinstance(backend, FixedTurnsBackend)
        assert backend.turns == ["a", "b"]
        assert backend.identity == "scripted:turns:policy.json"

    @pytest.mark.parametrize(
        "payload,message",
        [
            ('["list"]', "must hold a JSON object"),
            ('{"type": "turns", "turns": "not-a-list"}', "list of strings"),
            ('{"type": "turns", "turns": [1, 2]}', "list of strings"),
            ('{"type": "mystery"}', "unknown scripted policy type"),
        ],
    )
    def test_rejects_bad_specs(self, tmp_path, payload, message):
        path = tmp_path / "p.json"
        path.write_text(payload, "utf-8")
        with pytest.raises(ValueError, match=message):
            load_scripted(str(path))


class TestToChatMessages:
    def test_text_only_collapses_to_string(self):
        out = to_chat_messages([user("hello"), assistant("hi")])
        assert out == [
            {"role": "user", "content": "hello"},
            {"role": "assistant", "content": "hi"},
        ]

    def test_image_data_becomes_data_uri(self):
        message = Message(
            role="user",
            parts=(TextPart("look:"), ImagePart(data=b"abc")),
        )
        out = to_chat_messages([message])
        assert out[0]["content"] == [
            {"type": "text", "text": "look:"},
            {
                "type": "image_url",
                "image_url": {"url": "data:image/png;base64,YWJj"},
            },
        ]

    def test_image_path_read_from_disk(self, tmp_path):
        path = tmp_path / "img.jpg"
        path.write_bytes(b"abc")
        message = Message(
            role="user",
            parts=(ImagePart(path=str(path), media_type="image/jpeg"),),
        )
        out = to_chat_messages([message])
        assert out[0]["content"][0]["image_url"]["url"] == (
            "data:image/jpeg;base64,YWJj"
        )


CHAT_OK = {"choices": [{"message": {"content": "<think>ok</think><answer>1</answer>"}}]}


class FakeResponse:
    def __init__(self, status_code=200, payload=None):
        self.status_code = status_code
        self._payload = payload if payload is not None else CHAT_OK

    def raise_for_status(self):
        if self.status_code >= 400:
            raise RuntimeError(f"status {self.status_code}")

    def json(self):
        return self._payload


def install_fake_post(monkeypatch, outcomes):
    """Queue of FakeResponse objects or exceptions for requests.post."""
    calls = []
    queue = list(outcomes)

    def fake_post(url, json=None, headers=None, timeout=None):
        calls.append(
            {"url": url, "json": json, "headers": headers, "timeout": timeout}
        )
        item = queue.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    monkeypatch.setattr("requests.post", fake_post)
    return calls


class TestHttpBackend:
    def setup_method(self):
        self.messages = [user("rank these")]

    def test_success_payload_and_headers(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        calls = install_fake_post(monkeypatch, [FakeResponse()])
        backend = HttpBackend("http://localhost:9999/v1/chat")
        turn = backend.next_turn(self.messages)
        assert turn == "<think>ok</think><answer>1</answer>"
        (call,) = calls
        assert call["url"] == "http://localhost:9999/v1/chat"
        assert call["json"]["messages"] == [{"role": "user", "content": "rank these"}]
        assert call["json"]["temperature"] == 0.0
        assert call["json"]["max_tokens"] == 1024
        assert "model" not in call["json"]
        assert "seed" not in call["json"]
        assert "Authorization" not in call["headers"]
        assert call["timeout"] == 60.0

    def test_model_and_seed_included_when_set(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        calls = install_fake_post(monkeypatch, [FakeResponse()])
        backend = HttpBackend("http://h/v1", model="m-1", seed=7, temperature=0.5)
        backend.next_turn(self.messages)
        assert calls[0]["json"]["model"] == "m-1"
        assert calls[0]["json"]["seed"] == 7
        assert calls[0]["json"]["temperature"] == 0.5
        assert backend.identity == "http:http://h/v1#m-1"

    def test_bearer_token_from_environment(self, monkeypatch):
        monkeypatch.setenv("EVRANK_API_TOKEN", "tok-123")
        calls = install_fake_post(monkeypatch, [FakeResponse()])
        HttpBackend("http://h/v1").next_turn(self.messages)
        assert calls[0]["headers"]["Authorization"] == "Bearer tok-123"

    def test_custom_token_variable(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        monkeypatch.setenv("OTHER_TOKEN", "sesame")
        calls = install_fake_post(monkeypatch, [FakeResponse()])
        HttpBackend("http://h/v1", auth_token_env="OTHER_TOKEN").next_turn(
            self.messages
        )
        assert calls[0]["headers"]["Authorization"] == "Bearer sesame"

    def test_server_error_then_success(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        calls = install_fake_post(
            monkeypatch, [FakeResponse(status_code=503), FakeResponse()]
        )
        turn = HttpBackend("http://h/v1", retries=2).next_turn(self.messages)
        assert turn.endswith("</answer>")
        assert len(calls) == 2

    def test_exhausted_retries(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        calls = install_fake_post(
            monkeypatch, [FakeResponse(status_code=500)] * 3
        )
        backend = HttpBackend("http://h/v1", retries=2)
        with pytest.raises(BackendError, match="after retries.*server error 500"):
            backend.next_turn(self.messages)
        assert len(calls) == 3  # retries + 1 attempts

    def test_connection_error_then_success(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        calls = install_fake_post(
            monkeypatch, [ConnectionError("refused"), FakeResponse()]
        )
        turn = HttpBackend("http://h/v1", retries=1).next_turn(self.messages)
        assert turn.endswith("</answer>")
        assert len(calls) == 2

    def test_no_retries_means_single_attempt(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        calls = install_fake_post(monkeypatch, [ConnectionError("refused")])
        backend = HttpBackend("http://h/v1", retries=0)
        with pytest.raises(BackendError, match="refused"):
            backend.next_turn(self.messages)
        assert len(calls) == 1

    def test_client_errors_are_retried_then_fatal(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        calls = install_fake_post(
            monkeypatch, [FakeResponse(status_code=404)] * 2
        )
        backend = HttpBackend("http://h/v1", retries=1)
        with pytest.raises(BackendError, match="status 404"):
            backend.next_turn(self.messages)
        assert len(calls) == 2

    def test_list_content_joined(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        payload = {
            "choices": [
                {
                    "message": {
                        "content": [
                            {"type": "text", "text": "<think>a</think>"},
                            {"text": "<answer>1</answer>"},
                            {"type": "image_url"},
                        ]
                    }
                }
            ]
        }
        install_fake_post(monkeypatch, [FakeResponse(payload=payload)])
        turn = HttpBackend("http://h/v1").next_turn(self.messages)
        assert turn == "<think>a</think><answer>1</answer>"

    def test_non_text_content_fails_without_retry(self, monkeypatch):
        monkeypatch.delenv("EVRANK_API_TOKEN", raising=False)
        payload = {"choices": [{"message": {"content": 42}}]}
        calls = install_fake_post(
            monkeypatch, [FakeResponse(payload=payload)] * 3
        )
        backend = HttpBackend("http://h/v1", retries=2)
        with pytest.raises(BackendError, match="non-text content"):
            backend.next_turn(self.messages)
        assert len(calls) == 1  # malformed content is not a transport failure

    def test_not_deterministic(self):
        assert HttpBackend("http://h/v1").deterministic is False
