"""Chat-model backends and worker-prompt assembly.

Two interchangeable backends implement the same ``generate`` contract: an
HTTP client speaking the de-facto chat-completions JSON protocol, and a
scripted backend that replays canned responses for offline tests. Token
counts always come from the backend's own usage report; nothing here
re-tokenizes text.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import requests

from .core import BranchState, ContractViolation, SamplingParams

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")

ENV_CHAT_URL = "BRANCHPOOL_CHAT_URL"
ENV_CHAT_KEY = "BRANCHPOOL_CHAT_KEY"
ENV_CHAT_MODEL = "BRANCHPOOL_CHAT_MODEL"


class BackendError(RuntimeError):
    """Base class for generation-backend failures."""


class TransportError(BackendError):
    """Network-level failure; retryable. Carries the attempt count."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(BackendError):
    """Malformed wire response; fatal (retrying would corrupt accounting)."""


class TemplateError(ValueError):
    """A prompt template is missing a required placeholder."""


def note_line(kind: str, text: str) -> str:
    """Canonical one-line rendering of a pool note."""
    return f"- (type={kind}) {text}"


_PLACEHOLDER_RE = re.compile(r"\{\{\s*(\w+)\s*\}\}")


def fill_template(template: str, values: Mapping[str, str]) -> str:
    """Substitute ``{{name}}`` placeholders in a single pass.

    A line consisting solely of a placeholder whose value is empty is dropped
    entirely, so optional blocks collapse cleanly. Placeholders without a
    value raise TemplateError.
    """
    def _sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in values:
            raise TemplateError(f"no value for template placeholder {{{{{name}}}}}")
        return values[name]

    out_lines: list[str] = []
    for line in template.split("\n"):
        whole_line = _PLACEHOLDER_RE.fullmatch(line.strip())
        if whole_line:
            name = whole_line.group(1)
            if name not in values:
                raise TemplateError(f"no value for template placeholder {{{{{name}}}}}")
            if values[name] == "":
                continue
        out_lines.append(_PLACEHOLDER_RE.sub(_sub, line))
    return "\n".join(out_lines)


_TEMPLATE_FILES = {
    "worker_prompt": "worker_prompt.txt",
    "math_prompt": "math_prompt.txt",
    "serialization": "serialization.txt",
    "extraction_system": "extraction_system.txt",
    "extraction_user": "extraction_user.txt",
}


@dataclass(frozen=True)
class PromptTemplates:
    """The text assets every prompt is assembled from."""

    worker_prompt: str
    math_prompt: str
    serialization: str
    extraction_system: str
    extraction_user: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptTemplates":
        """Load templates from *directory* (default: the packaged assets)."""
        base = Path(directory) if directory is not None else Path(__file__).parent / "templates"
        texts = {}
        for field_name, filename in _TEMPLATE_FILES.items():
            path = base / filename
            if not path.is_file():
                raise TemplateError(f"template file missing: {path}")
            texts[field_name] = path.read_text(encoding="utf-8").rstrip("\n")
        return cls(**texts)

    def hashes(self) -> dict[str, str]:
        """sha256 of each template, for run manifests."""
        return {
            name: hashlib.sha256(getattr(self, name).encode("utf-8")).hexdigest()
            for name in _TEMPLATE_FILES
        }


@dataclass(frozen=True)
class PromptContext:
    """An ordered chat-message list ready for the wire."""

    messages: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        for role, _ in self.messages:
            if role not in ROLES:
                raise ValueError(f"invalid message role: {role!r}")

    def as_wire(self) -> list[dict[str, str]]:
        return [{"role": role, "content": content} for role, content in self.messages]

    def fingerprint(self) -> str:
        payload = json.dumps(self.as_wire(), ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class GenerationChunk:
    """One backend response: text plus the backend's own token accounting."""

    text: str
    token_count: int
    hit_eos: bool
    prompt_tokens: int

    @property
    def completion_tokens(self) -> int:
        return self.token_count


_SECTION_RE = re.compile(r"^\[(system|user|assistant)\]$", re.MULTILINE)


def _parse_serialization_sections(template: str) -> list[tuple[str, str]]:
    """Split the serialization template into (role, body-template) sections."""
    matches = list(_SECTION_RE.finditer(template))
    if not matches:
        raise TemplateError("serialization template has no [system]/[user]/[assistant] sections")
    sections = []
    for i, match in enumerate(matches):
        start = match.end()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(template)
        body = template[start:end].strip("\n")
        sections.append((match.group(1), body))
    return sections


_WORKER_PLACEHOLDERS = (
    "selected_blackboard_notes_or_empty",
    "worker_prompt",
    "original_problem",
    "branch_reasoning_continuation",
)


def build_worker_prompt(
    problem: str,
    branch: BranchState,
    broadcast: Sequence,
    templates: PromptTemplates,
) -> PromptContext:
    """Assemble the per-branch chat context for one search step.

    Message order is fixed: the broadcast block as the leading system message
    (empty body when nothing is shared), the worker instructions plus the
    default answer-format instruction, the problem, and finally the branch's
    own concatenated history as an assistant continuation (omitted while the
    history is empty). Pure function: identical inputs give identical bytes.

    *broadcast* is any sequence of objects with ``kind`` and ``text``
    attributes (pool notes).
    """
    for name in _WORKER_PLACEHOLDERS:
        if not re.search(r"\{\{\s*%s\s*\}\}" % name, templates.serialization):
            raise TemplateError(f"serialization template lacks placeholder {{{{{name}}}}}")
    notes_body = "\n".join(note_line(unit.kind, unit.text) for unit in broadcast)
    values = {
        "selected_blackboard_notes_or_empty": notes_body,
        "worker_prompt": templates.worker_prompt + "\n\n" + templates.math_prompt,
        "original_problem": problem,
        "branch_reasoning_continuation": branch.history_text(),
    }
    messages = []
    for role, body_template in _parse_serialization_sections(templates.serialization):
        body = fill_template(body_template, values)
        if role == "assistant" and body == "":
            continue
        messages.append((role, body))
    return PromptContext(messages=tuple(messages))


class ChatBackend(Protocol):
    """Uniform chunked-generation interface."""

    def generate(
        self,
        ctx: PromptContext,
        budget_tokens: int,
        sampling: SamplingParams,
        tag: tuple | None = None,
    ) -> GenerationChunk: ...


class HttpChatBackend:
    """Client for any chat-completions HTTP endpoint.

    Transport failures are retried with exponential backoff; malformed
    responses are fatal. Safe for concurrent use (one session per thread).
    """

    def __init__(
        self,
        endpoint_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 300.0,
        max_attempts: int = 3,
    ):
        self.endpoint_url = endpoint_url
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_attempts = max_attempts
        self._local = threading.local()

    @classmethod
    def from_env(cls, **kwargs) -> "HttpChatBackend":
        url = os.environ.get(ENV_CHAT_URL, "")
        if not url:
            raise BackendError(f"no chat endpoint configured; set {ENV_CHAT_URL}")
        model = os.environ.get(ENV_CHAT_MODEL, "default")
        return cls(url, model, api_key=os.environ.get(ENV_CHAT_KEY), **kwargs)

    def _session(self) -> requests.Session:
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def generate(
        self,
        ctx: PromptContext,
        budget_tokens: int,
        sampling: SamplingParams,
        tag: tuple | None = None,
    ) -> GenerationChunk:
        if budget_tokens < 1:
            raise ValueError("budget_tokens must be at least 1")
        payload: dict = {
            "model": self.model,
            "messages": ctx.as_wire(),
            "max_tokens": budget_tokens,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
        }
        if sampling.top_k > 0:
            payload["top_k"] = sampling.top_k
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._session().post(
                    self.endpoint_url, json=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("transport failure (attempt %d/%d): %s", attempt, self.max_attempts, exc)
            else:
                if response.status_code in (429,) or response.status_code >= 500:
                    last_error = TransportError(
                        f"server returned {response.status_code}", attempts=attempt
                    )
                    logger.warning(
                        "retryable status %d (attempt %d/%d)",
                        response.status_code, attempt, self.max_attempts,
                    )
                elif response.status_code != 200:
                    raise ProtocolError(
                        f"endpoint returned {response.status_code}: {response.text[:500]}"
                    )
                else:
                    return self._parse_response(response, budget_tokens)
            if attempt < self.max_attempts:
                time.sleep(0.5 * 2 ** (attempt - 1))
        raise TransportError(
            f"request failed after {self.max_attempts} attempts: {last_error}",
            attempts=self.max_attempts,
        )

    def _parse_response(self, response: requests.Response, budget_tokens: int) -> GenerationChunk:
        try:
            data = response.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {exc}") from None
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
            usage = data["usage"]
            prompt_tokens = int(usage["prompt_tokens"])
            completion_tokens = int(usage["completion_tokens"])
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat-completions response: missing {exc}") from None
        if text is None:
            text = ""
        if completion_tokens > budget_tokens:
            raise ProtocolError(
                f"backend reported {completion_tokens} completion tokens above budget {budget_tokens}"
            )
        # Absent finish_reason counts as not-EOS.
        hit_eos = choice.get("finish_reason") == "stop"
        return GenerationChunk(
            text=text,
            token_count=completion_tokens,
            hit_eos=hit_eos,
            prompt_tokens=prompt_tokens,
        )


@dataclass(frozen=True)
class ScriptedReply:
    """One canned backend response."""

    text: str
    token_count: int
    hit_eos: bool = False


def _word_count(text: str) -> int:
    return len(text.split())


class ScriptedBackend:
    """Deterministic backend replaying a keyed script; for offline tests.

    Lookups are keyed by the orchestrator-supplied request tag, falling back
    to a prompt fingerprint when no tag is given. Every key must resolve
    within a scenario; repeated identical requests return identical replies.
    Truncation under a tight budget keeps the first *budget* whitespace
    tokens of the scripted text.
    """

    def __init__(
        self,
        script: Mapping[tuple, ScriptedReply] | None = None,
        fingerprint_script: Mapping[str, ScriptedReply] | None = None,
    ):
        self.script = dict(script or {})
        self.fingerprint_script = dict(fingerprint_script or {})
        self.calls: list[tuple] = []
        self._lock = threading.Lock()

    def generate(
        self,
        ctx: PromptContext,
        budget_tokens: int,
        sampling: SamplingParams,
        tag: tuple | None = None,
    ) -> GenerationChunk:
        if budget_tokens < 1:
            raise ValueError("budget_tokens must be at least 1")
        with self._lock:
            if tag is not None:
                try:
                    reply = self.script[tag]
                except KeyError:
                    raise KeyError(f"scripted backend has no entry for tag {tag!r}") from None
                self.calls.append(tag)
            else:
                fp = ctx.fingerprint()
                try:
                    reply = self.fingerprint_script[fp]
                except KeyError:
                    raise KeyError(f"scripted backend has no entry for fingerprint {fp}") from None
                self.calls.append(("fingerprint", fp))
        prompt_tokens = sum(_word_count(content) for _, content in ctx.messages)
        if reply.token_count > budget_tokens:
            words = reply.text.split()
            text = " ".join(words[:budget_tokens])
            return GenerationChunk(
                text=text, token_count=budget_tokens, hit_eos=False, prompt_tokens=prompt_tokens
            )
        return GenerationChunk(
            text=reply.text,
            token_count=reply.token_count,
            hit_eos=reply.hit_eos,
            prompt_tokens=prompt_tokens,
        )


def generate_chunk(
    backend: ChatBackend,
    ctx: PromptContext,
    budget_tokens: int,
    sampling: SamplingParams,
    tag: tuple | None = None,
) -> GenerationChunk:
    """Request at most *budget_tokens* of continuation for *ctx*."""
    if budget_tokens < 1:
        raise ValueError("budget_tokens must be at least 1")
    chunk = backend.generate(ctx, budget_tokens, sampling, tag=tag)
    if chunk.token_count > budget_tokens:
        raise ProtocolError(
            f"backend returned {chunk.token_count} tokens above budget {budget_tokens}"
        )
    return chunk


def continue_until_done(
    backend: ChatBackend,
    ctx: PromptContext,
    branch: BranchState,
    sampling: SamplingParams,
    max_tokens: int,
    tag: tuple | None = None,
) -> GenerationChunk:
    """Run one unsynchronized request finishing *branch* (EOS or length cap)."""
    if branch.finished:
        raise ContractViolation(f"branch {branch.branch_id} is already finished")
    budget = max_tokens - branch.generated_tokens
    if budget < 1:
        raise ContractViolation(
            f"branch {branch.branch_id} has no token budget left but is not finished"
        )
    chunk = generate_chunk(backend, ctx, budget, sampling, tag=tag)
    branch.append_segment(chunk.text, chunk.token_count)
    branch.mark_finished("eos" if chunk.hit_eos else "length_cap")
    return chunk
