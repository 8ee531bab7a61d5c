"""Offline wire-level smoke: the full loop through the HTTP client against a
fake chat-completions server that behaves loosely like a model."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from branchpool.backend import HttpChatBackend
from branchpool.core import Mode, RunConfig, validate_config
from branchpool.embedding import MockEmbedder
from branchpool.orchestrator import run_query


class _FakeModelHandler(BaseHTTPRequestHandler):
    """Routes on prompt shape: distiller prompts get write-ups, workers get
    filler chunks until the length cap; later extractions repeat themselves."""

    note_counter = 0
    lock = threading.Lock()

    def do_POST(self):  # noqa: N802
        length = int(self.headers["Content-Length"])
        payload = json.loads(self.rfile.read(length))
        messages = payload["messages"]
        budget = payload["max_tokens"]
        prompt_tokens = sum(len(m["content"].split()) for m in messages)
        if messages[0]["content"].startswith("You are a strict Strategic"):
            with type(self).lock:
                type(self).note_counter += 1
                note_index = min(type(self).note_counter, 5)
            text = f"[BB_WRITE]\n- (type=insight) fact number {note_index} holds\n[/BB_WRITE]"
            completion, finish = 12, "stop"
        else:
            text = "considering cases and partial sums " * (budget // 6)
            completion, finish = budget, "length"
        body = json.dumps(
            {
                "choices": [{"message": {"content": text}, "finish_reason": finish}],
                "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion},
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
def model_server():
    _FakeModelHandler.note_counter = 0
    server = HTTPServer(("127.0.0.1", 0), _FakeModelHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
    server.shutdown()
    thread.join()


def test_wire_level_run(model_server):
    config = validate_config(
        RunConfig(
            branch_count=4,
            chunk_tokens=256,
            max_tokens=1024,
            window_size=1,
            start_threshold=1.0,
            stop_threshold=0.0,
            seed=1,
        )
    )
    backend = HttpChatBackend(model_server, model="fake")
    result = run_query(
        "What is 17 + 25?", config, backend, MockEmbedder(), problem_id="wire-smoke"
    )
    assert all(b.finished for b in result.branches)
    assert all(b.generated_tokens == 1024 for b in result.branches)
    # The first window admits fresh notes, later ones repeat: broadcasting starts.
    assert len(result.pool) >= 1
    assert any(t.new_mode is Mode.BROADCAST for t in result.scheduler.transition_log)
    # Usage-backed ledger for every request.
    assert all(r.prompt_tokens > 0 for r in result.requests)
    gen = [r for r in result.requests if r.kind == "cpt_generation"]
    assert all(r.effective_length == r.prompt_tokens + r.output_tokens for r in gen)
    ext = [r for r in result.requests if r.kind == "cpt_extraction"]
    assert len(ext) > 0
