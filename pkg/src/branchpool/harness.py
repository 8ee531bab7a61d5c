"""Evaluation and analysis over finished runs.

Answer handling is deliberately minimal: the last boxed expression wins, and
normalization covers whitespace, trivial LaTeX wrappers, and integer forms.
Gold answers in dataset files are expected to already be in normalized form.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .pool import BroadcastSet, InfoUnit

TOKENS_PER_UNIT_NORM = 10240


@dataclass(frozen=True)
class ProblemRecord:
    problem_id: str
    statement: str
    gold_answer: str

    def __post_init__(self) -> None:
        if not self.problem_id:
            raise ValueError("problem_id must be nonempty")
        if not self.gold_answer:
            raise ValueError(f"problem {self.problem_id}: gold_answer must be nonempty")


def load_problems(path: str | Path) -> list[ProblemRecord]:
    """Read a line-delimited dataset; problem ids must be unique."""
    problems: list[ProblemRecord] = []
    seen: set[str] = set()
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            record = ProblemRecord(
                problem_id=data["problem_id"],
                statement=data["statement"],
                gold_answer=data["gold_answer"],
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{line_no}: bad dataset record: {exc}") from None
        if record.problem_id in seen:
            raise ValueError(f"{path}:{line_no}: duplicate problem_id {record.problem_id!r}")
        seen.add(record.problem_id)
        problems.append(record)
    return problems


_BOXED_MARKER = "\\boxed{"
_INT_RE = re.compile(r"^[+-]?\d+$")


def _last_boxed_content(trace: str) -> str | None:
    """Balanced-brace scan for the content of the last boxed expression."""
    start = trace.rfind(_BOXED_MARKER)
    result = None
    while start != -1:
        i = start + len(_BOXED_MARKER)
        depth = 1
        for j in range(i, len(trace)):
            if trace[j] == "{":
                depth += 1
            elif trace[j] == "}":
                depth -= 1
                if depth == 0:
                    result = trace[i:j]
                    break
        if result is not None:
            return result
        # Unbalanced (truncated) box; fall back to an earlier one.
        start = trace.rfind(_BOXED_MARKER, 0, start)
    return None


def normalize_answer(raw: str) -> str:
    """Minimal canonical form: whitespace, $-wrappers, \\left/\\right, integers."""
    text = raw.strip()
    text = text.replace("\\left", "").replace("\\right", "")
    text = re.sub(r"\s+", " ", text).strip()
    while len(text) >= 2 and text.startswith("$") and text.endswith("$"):
        text = text[1:-1].strip()
    if _INT_RE.match(text):
        sign = "-" if text.startswith("-") else ""
        digits = text.lstrip("+-").lstrip("0") or "0"
        text = digits if digits == "0" else sign + digits
    return text


def extract_answer(trace: str) -> str | None:
    """The normalized content of the last boxed expression, if any."""
    content = _last_boxed_content(trace)
    if content is None:
        return None
    return normalize_answer(content)


def pass_at_1(answers: Sequence[str | None], gold: str) -> float:
    """Fraction of answers exactly matching gold (absent never matches)."""
    if not answers:
        raise ValueError("pass_at_1 requires a nonempty answer list")
    return sum(1 for a in answers if a is not None and a == gold) / len(answers)


def majority_vote(answers: Sequence[str | None]) -> str | None:
    """Most frequent present answer; ties break to the lexicographically
    smallest string; all-absent votes to nothing."""
    counts = Counter(a for a in answers if a is not None)
    if not counts:
        return None
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best)


@dataclass(frozen=True)
class StepInfoStats:
    """Per-step discovery counts, raw and per-10240-generated-tokens."""

    step: int
    new_count: int
    duplicate_count: int
    normalized_new: float
    normalized_duplicate: float


def info_statistics(run, config=None) -> list[StepInfoStats]:
    """Per-step new/duplicate note statistics for one run.

    Counts come from the pool's admission logs; normalization divides by the
    tokens actually generated in the step (active branches times the chunk
    length when every branch fills its chunk). Steps without an extraction
    pass are skipped.
    """
    del config  # Normalization uses the trace's actual token counts.
    stats: list[StepInfoStats] = []
    for trace in run.steps:
        if not trace.extracted:
            continue
        step_tokens = sum(trace.chunk_tokens.values())
        new = run.pool.new_counts.get(trace.step, 0)
        dup = run.pool.duplicate_counts.get(trace.step, 0)
        if step_tokens <= 0:
            raise ValueError(f"step {trace.step}: extraction ran but no tokens were generated")
        scale = TOKENS_PER_UNIT_NORM / step_tokens
        stats.append(
            StepInfoStats(
                step=trace.step,
                new_count=new,
                duplicate_count=dup,
                normalized_new=new * scale,
                normalized_duplicate=dup * scale,
            )
        )
    return stats


def stats_from_report(report: dict) -> list[StepInfoStats]:
    """Same per-step statistics, computed from a serialized run report."""
    new_counts = {int(k): v for k, v in report["pool"]["new_counts"].items()}
    dup_counts = {int(k): v for k, v in report["pool"]["duplicate_counts"].items()}
    stats: list[StepInfoStats] = []
    for trace in report["steps"]:
        if not trace["extracted"]:
            continue
        step = trace["step"]
        step_tokens = sum(trace["chunk_tokens"].values())
        if step_tokens <= 0:
            raise ValueError(f"step {step}: extraction ran but no tokens were generated")
        scale = TOKENS_PER_UNIT_NORM / step_tokens
        new = new_counts.get(step, 0)
        dup = dup_counts.get(step, 0)
        stats.append(
            StepInfoStats(
                step=step,
                new_count=new,
                duplicate_count=dup,
                normalized_new=new * scale,
                normalized_duplicate=dup * scale,
            )
        )
    return stats


def offline_inject(
    pool_units: Sequence[InfoUnit],
    ratio: int,
    rng: np.random.Generator,
) -> BroadcastSet:
    """Sample ratio% of a finished pool as a static starting broadcast.

    0 injects nothing, 100 injects the whole pool; sizes round down. The
    result is handed to a plain parallel-sampling run as its fixed shared
    block (no online extraction or scheduling).
    """
    if not 0 <= ratio <= 100:
        raise ValueError("injection ratio must be in 0..100")
    count = (ratio * len(pool_units)) // 100
    if count == len(pool_units):
        chosen = list(pool_units)
    else:
        picked = rng.choice(len(pool_units), size=count, replace=False) if count else []
        chosen = sorted((pool_units[i] for i in picked), key=lambda u: u.unit_id)
    return BroadcastSet(entries=tuple(chosen), step_issued=0)


@dataclass(frozen=True)
class RunMetrics:
    problem_id: str
    run_index: int
    pass_at_1: float
    majority_answer: str | None
    majority_correct: bool
    generated_tokens: int
    wall_clock: float


@dataclass(frozen=True)
class ProblemSummary:
    problem_id: str
    runs: tuple[RunMetrics, ...]

    @property
    def mean_pass_at_1(self) -> float:
        return sum(r.pass_at_1 for r in self.runs) / len(self.runs)

    @property
    def mean_majority(self) -> float:
        return sum(1.0 for r in self.runs if r.majority_correct) / len(self.runs)


def evaluate_run(run, gold_answer: str) -> RunMetrics:
    """Score one run's branches against the gold answer."""
    answers = [extract_answer(branch.history_text()) for branch in run.branches]
    majority = majority_vote(answers)
    return RunMetrics(
        problem_id=run.problem_id,
        run_index=run.run_index,
        pass_at_1=pass_at_1(answers, gold_answer),
        majority_answer=majority,
        majority_correct=majority == gold_answer,
        generated_tokens=sum(branch.generated_tokens for branch in run.branches),
        wall_clock=run.wall_clock,
    )


def summarize_batch(results, problems: Sequence[ProblemRecord]) -> dict:
    """Aggregate metrics document for a batch of runs."""
    gold = {p.problem_id: p.gold_answer for p in problems}
    by_problem: dict[str, list[RunMetrics]] = {}
    for run in results:
        metrics = evaluate_run(run, gold[run.problem_id])
        by_problem.setdefault(run.problem_id, []).append(metrics)
    summaries = [
        ProblemSummary(problem_id=pid, runs=tuple(sorted(runs, key=lambda r: r.run_index)))
        for pid, runs in sorted(by_problem.items())
    ]
    doc = {
        "problems": [
            {
                "problem_id": s.problem_id,
                "pass_at_1_mean": s.mean_pass_at_1,
                "majority_vote_mean": s.mean_majority,
                "runs": [
                    {
                        "run_index": r.run_index,
                        "pass_at_1": r.pass_at_1,
                        "majority_answer": r.majority_answer,
                        "majority_correct": r.majority_correct,
                        "generated_tokens": r.generated_tokens,
                        "wall_clock": r.wall_clock,
                    }
                    for r in s.runs
                ],
            }
            for s in summaries
        ],
    }
    if summaries:
        doc["pass_at_1_mean"] = float(np.mean([s.mean_pass_at_1 for s in summaries]))
        doc["majority_vote_mean"] = float(np.mean([s.mean_majority for s in summaries]))
        doc["generated_tokens_total"] = int(
            sum(r.generated_tokens for s in summaries for r in s.runs)
        )
        doc["wall_clock_mean"] = float(np.mean([r.wall_clock for s in summaries for r in s.runs]))
    return doc
