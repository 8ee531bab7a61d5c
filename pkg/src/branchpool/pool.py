"""The query-level shared note pool: extraction parsing, deduplicated
admission, broadcast sampling, and block rendering.

The pool is append-only and lives for exactly one query. Admission order at a
step boundary is fixed (ascending branch index, then the order of candidates
within each branch's write-up), so per-step new counts are reproducible.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .backend import PromptContext, PromptTemplates, fill_template, note_line
from .core import BranchState
from .embedding import EmbeddingVector, max_similarity

logger = logging.getLogger(__name__)

NOTE_KINDS = ("insight", "pitfall")

# Candidates written after this many pool entries no longer see the oldest
# notes in their extraction prompt (bounds prompt growth).
EXTRACTION_HISTORY_CAP = 64

BB_WRITE_OPEN = "[BB_WRITE]"
BB_WRITE_CLOSE = "[/BB_WRITE]"
BROADCAST_OPEN = "[BLACKBOARD BROADCAST]"
BROADCAST_CLOSE = "[/BLACKBOARD BROADCAST]"

_NOTE_RE = re.compile(r"^-\s*\(type=(insight|pitfall)\)\s*(\S.*?)\s*$")
_BLOCK_RE = re.compile(re.escape(BB_WRITE_OPEN) + r"(.*?)" + re.escape(BB_WRITE_CLOSE), re.DOTALL)


@dataclass(frozen=True)
class InfoUnit:
    """One admitted note: a single-sentence insight or pitfall."""

    unit_id: int
    text: str
    kind: str
    embedding: EmbeddingVector
    source_branch: int
    step_admitted: int

    def __post_init__(self) -> None:
        if self.kind not in NOTE_KINDS:
            raise ValueError(f"invalid note kind: {self.kind!r}")
        if not self.text:
            raise ValueError("note text must be nonempty")


@dataclass(frozen=True)
class AdmitResult:
    """Outcome of one admission attempt."""

    admitted: bool
    unit: InfoUnit | None = None
    max_similarity: float | None = None


@dataclass(frozen=True)
class AdmissionEvent:
    """Replay record for dedup soundness checks."""

    step: int
    source_branch: int
    kind: str
    text: str
    max_similarity: float | None
    admitted: bool
    unit_id: int | None


@dataclass(frozen=True)
class BroadcastSet:
    """Up to M pool entries issued to every branch at one step."""

    entries: tuple[InfoUnit, ...]
    step_issued: int


class SharedPool:
    """Deduplicated query-level pool of extracted notes.

    Single-writer: admissions happen in one serialized critical section per
    step. Any two stored entries had cosine similarity below the threshold at
    admission time.
    """

    def __init__(self, dedup_threshold: float):
        if not 0 <= dedup_threshold <= 1:
            raise ValueError("dedup threshold must be in [0, 1]")
        self.dedup_threshold = dedup_threshold
        self.entries: list[InfoUnit] = []
        self.new_counts: dict[int, int] = {}
        self.duplicate_counts: dict[int, int] = {}
        self.admission_log: list[AdmissionEvent] = []

    def __len__(self) -> int:
        return len(self.entries)

    def admit(self, kind: str, text: str, embedder, source_branch: int, step: int) -> AdmitResult:
        """Try to add one candidate note.

        An empty pool admits unconditionally; otherwise the candidate enters
        iff its max cosine against existing entries is strictly below the
        threshold (a tie is rejected). Admission increments the step's new
        count, rejection its duplicate count.
        """
        if not text:
            raise ValueError("candidate text must be nonempty")
        vector = embedder.embed(text)
        similarity: float | None = None
        if self.entries:
            similarity = max_similarity(vector, [unit.embedding for unit in self.entries])
            if similarity >= self.dedup_threshold:
                self.duplicate_counts[step] = self.duplicate_counts.get(step, 0) + 1
                self.admission_log.append(
                    AdmissionEvent(step, source_branch, kind, text, similarity, False, None)
                )
                return AdmitResult(admitted=False, max_similarity=similarity)
        unit = InfoUnit(
            unit_id=len(self.entries),
            text=text,
            kind=kind,
            embedding=vector,
            source_branch=source_branch,
            step_admitted=step,
        )
        self.entries.append(unit)
        self.new_counts[step] = self.new_counts.get(step, 0) + 1
        self.admission_log.append(
            AdmissionEvent(step, source_branch, kind, text, similarity, True, unit.unit_id)
        )
        return AdmitResult(admitted=True, unit=unit, max_similarity=similarity)

    def sample_broadcast(self, max_entries: int, rng: np.random.Generator, step: int) -> BroadcastSet:
        """Pick up to *max_entries* notes for the next step's shared block.

        The whole pool is broadcast when it fits; otherwise a uniform sample
        without replacement, reported in admission order. Deterministic for a
        given rng stream.
        """
        if max_entries < 1:
            raise ValueError("broadcast size must be at least 1")
        if len(self.entries) <= max_entries:
            return BroadcastSet(entries=tuple(self.entries), step_issued=step)
        picked = rng.choice(len(self.entries), size=max_entries, replace=False)
        chosen = sorted((self.entries[i] for i in picked), key=lambda u: u.unit_id)
        return BroadcastSet(entries=tuple(chosen), step_issued=step)

    def recent_entries(self, cap: int = EXTRACTION_HISTORY_CAP) -> list[InfoUnit]:
        return self.entries[-cap:]

    def dump_lines(self) -> list[str]:
        """Line-delimited pool records with stable field order."""
        return [
            json.dumps(
                {
                    "unit_id": unit.unit_id,
                    "step": unit.step_admitted,
                    "branch": unit.source_branch,
                    "kind": unit.kind,
                    "text": unit.text,
                },
                ensure_ascii=False,
            )
            for unit in self.entries
        ]


def load_pool_dump(path, embedder) -> list[InfoUnit]:
    """Rebuild pool units from a line-delimited dump, re-embedding the texts."""
    from pathlib import Path

    units: list[InfoUnit] = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            units.append(
                InfoUnit(
                    unit_id=record["unit_id"],
                    text=record["text"],
                    kind=record["kind"],
                    embedding=embedder.embed(record["text"]),
                    source_branch=record["branch"],
                    step_admitted=record["step"],
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{line_no}: bad pool record: {exc}") from None
    return units


def parse_bb_write(raw: str) -> list[tuple[str, str]]:
    """Extract (kind, text) candidates from a blackboard write-up.

    Only the last well-formed block counts. Lines inside it that do not match
    the bullet grammar are skipped with a warning; a missing block yields an
    empty list. Lenient by design: the input is model-generated.
    """
    blocks = _BLOCK_RE.findall(raw)
    if not blocks:
        return []
    candidates: list[tuple[str, str]] = []
    for line in blocks[-1].split("\n"):
        stripped = line.strip()
        if not stripped:
            continue
        match = _NOTE_RE.match(stripped)
        if match:
            candidates.append((match.group(1), match.group(2)))
        else:
            logger.warning("skipping malformed blackboard line: %r", stripped)
    return candidates


def render_note_lines(units: Iterable) -> str:
    """One bullet per note; units need only ``kind`` and ``text``."""
    return "\n".join(note_line(unit.kind, unit.text) for unit in units)


def render_broadcast(broadcast: BroadcastSet) -> str:
    """Full shared-information block; empty sets render bare delimiters."""
    body = render_note_lines(broadcast.entries)
    if body:
        return f"{BROADCAST_OPEN}\n{body}\n{BROADCAST_CLOSE}"
    return f"{BROADCAST_OPEN}\n{BROADCAST_CLOSE}"


def render_bb_write(pairs: Iterable[tuple[str, str]]) -> str:
    """Render (kind, text) pairs as a write-up block (inverse of the parser)."""
    body = "\n".join(note_line(kind, text) for kind, text in pairs)
    if body:
        return f"{BB_WRITE_OPEN}\n{body}\n{BB_WRITE_CLOSE}"
    return f"{BB_WRITE_OPEN}\n{BB_WRITE_CLOSE}"


def build_extraction_prompt(
    problem: str,
    branch: BranchState,
    new_segment: str,
    prior_notes: Sequence[InfoUnit],
    templates: PromptTemplates,
) -> PromptContext:
    """Assemble the note-extraction request for one branch's fresh segment.

    The distiller instructions ride as the system message; the user message
    carries previously extracted notes (HISTORY BROADCAST), the problem, the
    transcript before the new segment, and the new segment itself.
    """
    if not new_segment:
        raise ValueError("new_segment must be nonempty")
    transcript = branch.history_text()
    if transcript.endswith(new_segment):
        prefix = transcript[: len(transcript) - len(new_segment)]
    else:
        prefix = transcript
    user_body = fill_template(
        templates.extraction_user,
        {
            "previous_notes_or_empty": render_note_lines(prior_notes),
            "original_problem": problem,
            "transcript_prefix": prefix,
            "new_segment": new_segment,
        },
    )
    return PromptContext(
        messages=(
            ("system", templates.extraction_system),
            ("user", user_body),
        )
    )
