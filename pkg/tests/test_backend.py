"""Prompt assembly, template filling, scripted and HTTP backends."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

from branchpool.backend import (
    HttpChatBackend,
    ProtocolError,
    PromptContext,
    PromptTemplates,
    ScriptedBackend,
    ScriptedReply,
    TemplateError,
    TransportError,
    build_worker_prompt,
    continue_until_done,
    fill_template,
    generate_chunk,
)
from branchpool.core import BranchState, ContractViolation, SamplingParams
from branchpool.embedding import MockEmbedder
from branchpool.pool import InfoUnit

FIXTURES = Path(__file__).parent / "fixtures"
SAMPLING = SamplingParams()


@pytest.fixture(scope="module")
def templates() -> PromptTemplates:
    return PromptTemplates.load()


def _unit(unit_id: int, kind: str, text: str) -> InfoUnit:
    return InfoUnit(unit_id, text, kind, MockEmbedder().embed(text), 0, 1)


def test_fill_template_substitutes_and_drops_empty_lines():
    template = "head\n{{ body }}\ntail"
    assert fill_template(template, {"body": "x"}) == "head\nx\ntail"
    assert fill_template(template, {"body": ""}) == "head\ntail"
    with pytest.raises(TemplateError, match="no value"):
        fill_template(template, {})


def test_templates_load_and_hash(templates):
    hashes = templates.hashes()
    assert set(hashes) == {
        "worker_prompt", "math_prompt", "serialization", "extraction_system", "extraction_user"
    }
    assert all(len(h) == 64 for h in hashes.values())
    assert "\\boxed{}" in templates.math_prompt


def test_worker_prompt_empty_broadcast_empty_history(templates):
    ctx = build_worker_prompt("problem text", BranchState(branch_id=0), (), templates)
    roles = [m[0] for m in ctx.messages]
    assert roles == ["system", "user", "user"]
    assert ctx.messages[0][1] == "[BLACKBOARD BROADCAST]\n[/BLACKBOARD BROADCAST]"
    assert ctx.messages[2][1] == "problem text"
    assert templates.math_prompt in ctx.messages[1][1]


def test_worker_prompt_notes_and_history(templates):
    branch = BranchState(branch_id=1)
    branch.append_segment("step1", 1)
    notes = [_unit(0, "insight", "a note"), _unit(1, "pitfall", "a warning")]
    ctx = build_worker_prompt("p", branch, notes, templates)
    assert [m[0] for m in ctx.messages] == ["system", "user", "user", "assistant"]
    assert ctx.messages[0][1].count("\n") == 3
    assert "- (type=insight) a note" in ctx.messages[0][1]
    assert "- (type=pitfall) a warning" in ctx.messages[0][1]
    assert ctx.messages[3][1] == "step1"


def test_worker_prompt_is_pure(templates):
    branch = BranchState(branch_id=0)
    branch.append_segment("h", 1)
    notes = [_unit(0, "insight", "n")]
    first = build_worker_prompt("p", branch, notes, templates)
    second = build_worker_prompt("p", branch, notes, templates)
    assert first == second


def test_worker_prompt_matches_goldens(templates):
    golden = json.loads((FIXTURES / "golden_worker_prompts.json").read_text())
    problem = "How many positive divisors does 360 have?"
    emb = MockEmbedder()
    units = [
        InfoUnit(0, "the divisor count multiplies exponent successors", "insight",
                 emb.embed("the divisor count multiplies exponent successors"), 0, 1),
        InfoUnit(1, "do not forget the exponent of five", "pitfall",
                 emb.embed("do not forget the exponent of five"), 1, 1),
    ]
    empty = build_worker_prompt(problem, BranchState(branch_id=0), (), templates)
    assert [list(m) for m in empty.messages] == golden["empty_broadcast"]

    two = build_worker_prompt(problem, BranchState(branch_id=1), units, templates)
    assert [list(m) for m in two.messages] == golden["two_notes"]

    branch = BranchState(branch_id=2)
    branch.append_segment("Factor 360 = 2^3 * 3^2 * 5. ", 12)
    branch.append_segment("So the count is 4 * 3 * 2. ", 11)
    history = build_worker_prompt(problem, branch, units, templates)
    assert [list(m) for m in history.messages] == golden["with_history"]


def test_missing_placeholder_is_configuration_error(templates):
    broken = PromptTemplates(
        worker_prompt=templates.worker_prompt,
        math_prompt=templates.math_prompt,
        serialization="[system]\nno placeholders here",
        extraction_system=templates.extraction_system,
        extraction_user=templates.extraction_user,
    )
    with pytest.raises(TemplateError, match="lacks placeholder"):
        build_worker_prompt("p", BranchState(branch_id=0), (), broken)


def test_scripted_backend_echo_and_eos():
    backend = ScriptedBackend(
        script={
            ("q", "gen", 0, 0): ScriptedReply("Let x=5. ", 2048, hit_eos=False),
            ("q", "gen", 1, 0): ScriptedReply("done", 512, hit_eos=True),
        }
    )
    ctx = PromptContext(messages=(("user", "hi"),))
    chunk = generate_chunk(backend, ctx, 2048, SAMPLING, tag=("q", "gen", 0, 0))
    assert (chunk.text, chunk.token_count, chunk.hit_eos) == ("Let x=5. ", 2048, False)
    eos_chunk = generate_chunk(backend, ctx, 2048, SAMPLING, tag=("q", "gen", 1, 0))
    assert (eos_chunk.token_count, eos_chunk.hit_eos) == (512, True)


def test_scripted_backend_truncates_to_budget():
    backend = ScriptedBackend(
        script={("q", "gen", 0, 0): ScriptedReply("alpha beta gamma", 2048, hit_eos=True)}
    )
    ctx = PromptContext(messages=(("user", "hi"),))
    chunk = generate_chunk(backend, ctx, 1, SAMPLING, tag=("q", "gen", 0, 0))
    assert chunk.token_count == 1
    assert chunk.text == "alpha"
    assert chunk.hit_eos is False


def test_scripted_backend_fingerprint_fallback_and_missing_key():
    ctx = PromptContext(messages=(("user", "fingerprint me"),))
    backend = ScriptedBackend(
        fingerprint_script={ctx.fingerprint(): ScriptedReply("ok", 1, hit_eos=True)}
    )
    assert generate_chunk(backend, ctx, 4, SAMPLING).text == "ok"
    with pytest.raises(KeyError):
        generate_chunk(backend, ctx, 4, SAMPLING, tag=("missing",))


def test_budget_zero_is_precondition_error():
    backend = ScriptedBackend(script={})
    ctx = PromptContext(messages=(("user", "x"),))
    with pytest.raises(ValueError):
        generate_chunk(backend, ctx, 0, SAMPLING, tag=("t",))


def test_continue_until_done_budget_and_finish():
    branch = BranchState(branch_id=0)
    branch.append_segment("x " * 36000, 36000)
    seen = {}

    class Spy:
        def generate(self, ctx, budget_tokens, sampling, tag=None):
            seen["budget"] = budget_tokens
            return ScriptedBackend(
                script={("t",): ScriptedReply("tail", 100, hit_eos=True)}
            ).generate(ctx, budget_tokens, sampling, tag=("t",))

    ctx = PromptContext(messages=(("user", "x"),))
    chunk = continue_until_done(Spy(), ctx, branch, SAMPLING, max_tokens=38000)
    assert seen["budget"] == 2000
    assert chunk.hit_eos and branch.finished and branch.finish_reason == "eos"
    with pytest.raises(ContractViolation):
        continue_until_done(Spy(), ctx, branch, SAMPLING, max_tokens=38000)


def test_continue_until_done_length_cap():
    branch = BranchState(branch_id=0)
    backend = ScriptedBackend(script={("t",): ScriptedReply("w " * 50, 50, hit_eos=False)})
    ctx = PromptContext(messages=(("user", "x"),))
    continue_until_done(backend, ctx, branch, SAMPLING, max_tokens=50, tag=("t",))
    assert branch.finish_reason == "length_cap"


class _FakeChatHandler(BaseHTTPRequestHandler):
    fail_first = 0
    calls = 0

    def do_POST(self):  # noqa: N802  (stdlib naming)
        length = int(self.headers["Content-Length"])
        payload = json.loads(self.rfile.read(length))
        type(self).calls += 1
        if type(self).calls <= type(self).fail_first:
            self.send_response(500)
            self.end_headers()
            return
        body = json.dumps(
            {
                "choices": [{"message": {"content": "4"}, "finish_reason": "stop"}],
                "usage": {
                    "prompt_tokens": sum(len(m["content"].split()) for m in payload["messages"]),
                    "completion_tokens": 1,
                },
            }
        ).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def chat_server():
    _FakeChatHandler.fail_first = 0
    _FakeChatHandler.calls = 0
    server = HTTPServer(("127.0.0.1", 0), _FakeChatHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
    server.shutdown()
    thread.join()


def test_http_backend_round_trip(chat_server):
    backend = HttpChatBackend(chat_server, model="m", max_attempts=3)
    ctx = PromptContext(messages=(("user", "what is 2+2"),))
    chunk = backend.generate(ctx, 16, SAMPLING)
    assert chunk.text == "4"
    assert chunk.hit_eos is True
    assert chunk.token_count == chunk.completion_tokens == 1
    assert chunk.prompt_tokens == 3  # fake server counts whitespace words


def test_http_backend_retries_transport_errors(chat_server):
    _FakeChatHandler.fail_first = 2
    backend = HttpChatBackend(chat_server, model="m", max_attempts=3)
    ctx = PromptContext(messages=(("user", "retry me"),))
    assert backend.generate(ctx, 16, SAMPLING).text == "4"
    assert _FakeChatHandler.calls == 3


def test_http_backend_gives_up_after_attempts(chat_server):
    _FakeChatHandler.fail_first = 99
    backend = HttpChatBackend(chat_server, model="m", max_attempts=3)
    ctx = PromptContext(messages=(("user", "fail"),))
    with pytest.raises(TransportError) as excinfo:
        backend.generate(ctx, 16, SAMPLING)
    assert excinfo.value.attempts == 3


def test_http_backend_parse_protocol_errors():
    backend = HttpChatBackend("http://unused", model="m")

    class FakeResponse:
        def __init__(self, payload):
            self.payload = payload

        def json(self):
            return self.payload

    with pytest.raises(ProtocolError):
        backend._parse_response(FakeResponse({"choices": []}), 16)
    with pytest.raises(ProtocolError):
        backend._parse_response(
            FakeResponse({"choices": [{"message": {"content": "x"}}]}), 16
        )
    # Over-budget usage corrupts accounting and must be fatal.
    with pytest.raises(ProtocolError):
        backend._parse_response(
            FakeResponse(
                {
                    "choices": [{"message": {"content": "x"}, "finish_reason": "stop"}],
                    "usage": {"prompt_tokens": 1, "completion_tokens": 99},
                }
            ),
            16,
        )
    # Absent finish_reason counts as not-EOS.
    chunk = backend._parse_response(
        FakeResponse(
            {
                "choices": [{"message": {"content": "x"}}],
                "usage": {"prompt_tokens": 1, "completion_tokens": 1},
            }
        ),
        16,
    )
    assert chunk.hit_eos is False
