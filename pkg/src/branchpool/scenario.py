"""A self-contained scripted scenario for offline end-to-end runs.

Four branches, nine synchronized steps, then a free-run completion. The
extraction scripts are arranged so the per-step admitted counts follow a
fixed decay profile: the first window pins the reference gain, the second
window triggers broadcasting, and the third stops synchronization. All note
texts were checked pairwise against the mock embedder so that intended
admissions stay below the dedup threshold and duplicates are exact repeats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .backend import ScriptedBackend, ScriptedReply
from .core import RunConfig, config_from_dict
from .harness import ProblemRecord

PROBLEM_ID = "unit-squares-05"
GOLD_ANSWER = "42"
STATEMENT = (
    "How many squares of any orientation have all four vertices on the "
    "lattice points of a 6 by 6 grid?"
)

CONFIG_DICT = {
    "branch_count": 4,
    "chunk_tokens": 128,
    "max_tokens": 4096,
    "broadcast_size": 512,
    "dedup_threshold": 0.75,
    "window_size": 3,
    "start_threshold": 0.4,
    "stop_threshold": 0.1,
    "epsilon": 1e-9,
    "sampling": {"temperature": 0.6, "top_p": 0.95, "top_k": 20},
    "seed": 7,
}

EXPECTED_NEW_COUNTS = [10, 8, 12, 3, 3, 3, 0, 1, 1]
EXPECTED_DUP_COUNTS = [0, 1, 0, 1, 2, 1, 4, 2, 2]
EXPECTED_POOL_SIZE = sum(EXPECTED_NEW_COUNTS)

# Notes in admission order (step, branch, kind, text). Numbers in the
# comments below index into this list for the duplicate repeats.
_ADMITTED_NOTES: list[tuple[int, int, str, str]] = [
    # step 1
    (1, 0, "insight", "the lattice points form a square grid"),
    (1, 0, "insight", "each side length must divide sixty"),
    (1, 0, "pitfall", "origin corners may be counted twice"),
    (1, 1, "insight", "rotated squares have vertices on distinct residues"),
    (1, 1, "insight", "area scales with the sum of two squares"),
    (1, 1, "insight", "tilted placements require integer leg offsets"),
    (1, 2, "insight", "boundary cells admit fewer anchor positions"),
    (1, 2, "insight", "symmetry halves the independent orientation count"),
    (1, 3, "insight", "axis aligned squares contribute quadratic growth"),
    (1, 3, "insight", "diagonal vectors determine every square uniquely"),
    # step 2
    (2, 0, "insight", "anchor translation gives a product formula"),
    (2, 0, "pitfall", "degenerate zero area squares are excluded"),
    (2, 1, "insight", "vertex coordinates stay within the bounding box"),
    (2, 1, "insight", "complementary counting removes clipped placements"),
    (2, 2, "insight", "leg pairs with shared factors collapse together"),
    (2, 2, "insight", "primitive vectors generate scaled copies"),
    (2, 3, "insight", "orientation classes map to coprime pairs"),
    (2, 3, "insight", "reflections pair up distinct tilted families"),
    # step 3
    (3, 0, "insight", "the count splits by greatest common divisor"),
    (3, 0, "insight", "divisor sums appear after regrouping terms"),
    (3, 0, "insight", "small cases match the closed formula"),
    (3, 1, "insight", "telescoping cancels adjacent partial totals"),
    (3, 1, "insight", "the generating function factors into geometric series"),
    (3, 1, "insight", "coefficients stay nonnegative in every expansion"),
    (3, 2, "insight", "modular residues rule out odd leg sums"),
    (3, 2, "pitfall", "parity arguments eliminate half the candidates"),
    (3, 2, "insight", "an involution fixes only axis aligned cases"),
    (3, 3, "insight", "extreme placements touch at most two edges"),
    (3, 3, "pitfall", "corner anchored squares need separate treatment"),
    (3, 3, "insight", "the recursion depth is bounded by grid size"),
    # step 4
    (4, 0, "insight", "summing triangular numbers gives the aligned total"),
    (4, 1, "insight", "weighted lattice counts reduce to convolution"),
    (4, 2, "insight", "inclusion exclusion corrects the double counted border"),
    # step 5
    (5, 0, "insight", "the quadratic term dominates for large grids"),
    (5, 1, "insight", "closed form verified against brute force enumeration"),
    (5, 3, "insight", "the final expression simplifies after substitution"),
    # step 6
    (6, 1, "insight", "edge effects vanish beyond the threshold size"),
    (6, 2, "insight", "the alternating sum collapses to boundary terms"),
    (6, 3, "insight", "numerical checks agree through grid twenty"),
    # step 8
    (8, 0, "insight", "a bijection with divisor triples closes the argument"),
    # step 9
    (9, 3, "insight", "the answer follows from the divisor identity"),
]

# Duplicate candidates: (step, branch, index into _ADMITTED_NOTES to repeat).
_DUPLICATE_REPEATS: list[tuple[int, int, int]] = [
    (2, 0, 1),
    (4, 2, 6),
    (5, 0, 18),
    (5, 3, 22),
    (6, 3, 29),
    (7, 0, 0),
    (7, 1, 22),
    (7, 2, 28),
    (7, 3, 13),
    (8, 1, 35),
    (8, 3, 4),
    (9, 1, 39),
    (9, 2, 32),
]

# (step, branch) cells whose reply is chatter with no write-up block at all;
# every other cell without notes yields an explicit empty block.
_NO_BLOCK_CALLS = {(5, 2)}

STEPS = 9
BRANCHES = 4
CHUNK_TOKENS = 128
EXTRACTION_TOKENS = 48
FREERUN_TOKENS = 64

# Branch 2 disagrees; majority still lands on the gold answer.
_FREERUN_ANSWERS = {0: "42", 1: "42", 2: "41", 3: "42"}


def _generation_text(branch: int, step: int) -> str:
    return (
        f"Step {step} on branch {branch}: enumerate orientation family {step}.{branch}, "
        f"tally partial count {step * 100 + branch}, and compare against the running bound. "
    )


def _extraction_text(branch: int, step: int) -> str:
    if (step, branch) in _NO_BLOCK_CALLS:
        return "No reusable intermediate notes were found in this segment."
    lines = []
    for s, b, kind, text in _ADMITTED_NOTES:
        if (s, b) == (step, branch):
            lines.append(f"- (type={kind}) {text}")
    for s, b, index in _DUPLICATE_REPEATS:
        if (s, b) == (step, branch):
            _, _, kind, text = _ADMITTED_NOTES[index]
            lines.append(f"- (type={kind}) {text}")
    if (step, branch) == (3, 1):
        # One malformed line to exercise the lenient parser.
        lines.append("general progress remark without a tag")
    body = "\n".join(lines)
    if body:
        return f"[BB_WRITE]\n{body}\n[/BB_WRITE]"
    return "[BB_WRITE]\n[/BB_WRITE]"


def _freerun_text(branch: int) -> str:
    return (
        f"Branch {branch} consolidates the families, checks the small grid cases, "
        f"and concludes the total is \\boxed{{{_FREERUN_ANSWERS[branch]}}}."
    )


@dataclass(frozen=True)
class Scenario:
    problems: list[ProblemRecord]
    config: RunConfig
    script: dict[tuple, ScriptedReply]

    def backend(self) -> ScriptedBackend:
        return ScriptedBackend(script=self.script)


def build_scenario() -> Scenario:
    script: dict[tuple, ScriptedReply] = {}
    for step in range(1, STEPS + 1):
        for branch in range(BRANCHES):
            script[(PROBLEM_ID, "gen", branch, step)] = ScriptedReply(
                text=_generation_text(branch, step), token_count=CHUNK_TOKENS, hit_eos=False
            )
            script[(PROBLEM_ID, "ext", branch, step)] = ScriptedReply(
                text=_extraction_text(branch, step), token_count=EXTRACTION_TOKENS, hit_eos=True
            )
    for branch in range(BRANCHES):
        script[(PROBLEM_ID, "freerun", branch)] = ScriptedReply(
            text=_freerun_text(branch), token_count=FREERUN_TOKENS, hit_eos=True
        )
        # Free-run segments distill to nothing; only used with the
        # freerun-extraction analysis flag.
        script[(PROBLEM_ID, "ext", branch, STEPS + 1)] = ScriptedReply(
            text="[BB_WRITE]\n[/BB_WRITE]", token_count=8, hit_eos=True
        )
    problems = [
        ProblemRecord(problem_id=PROBLEM_ID, statement=STATEMENT, gold_answer=GOLD_ANSWER)
    ]
    return Scenario(problems=problems, config=config_from_dict(CONFIG_DICT), script=script)


def scenario_to_json(scenario: Scenario) -> str:
    """Serialize a scenario to the fixture file format used by --scripted."""
    entries = [
        {
            "tag": list(tag),
            "text": reply.text,
            "tokens": reply.token_count,
            "eos": reply.hit_eos,
        }
        for tag, reply in scenario.script.items()
    ]
    doc = {
        "problems": [
            {"problem_id": p.problem_id, "statement": p.statement, "gold_answer": p.gold_answer}
            for p in scenario.problems
        ],
        "script": entries,
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def load_fixture(path: str | Path) -> tuple[list[ProblemRecord], ScriptedBackend]:
    """Read a scripted fixture file: its problems and its replay backend."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    problems = [
        ProblemRecord(
            problem_id=p["problem_id"], statement=p["statement"], gold_answer=p["gold_answer"]
        )
        for p in data["problems"]
    ]
    script = {
        tuple(entry["tag"]): ScriptedReply(
            text=entry["text"], token_count=entry["tokens"], hit_eos=entry.get("eos", False)
        )
        for entry in data["script"]
    }
    return problems, ScriptedBackend(script=script)
