"""The top-level search loop: synchronized chunk generation, pool update,
schedule update, and free-run completion.

Each step is a two-phase barrier: all branch chunks complete concurrently,
then all extraction calls complete concurrently, then admission and the
schedule update run serialized in a fixed order (ascending branch index,
candidate order within a branch). Branch histories stay private; sharing
happens only through the broadcast block at step boundaries.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .backend import (
    BackendError,
    ChatBackend,
    GenerationChunk,
    PromptTemplates,
    build_worker_prompt,
    continue_until_done,
    generate_chunk,
)
from .core import BranchState, Mode, RunConfig, derive_rng, validate_config
from .cost import RequestRecord
from .pool import BroadcastSet, SharedPool, build_extraction_prompt, parse_bb_write
from .scheduler import BroadcastScheduler, scheduler_from_config

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepTrace:
    """Everything observable about one loop iteration."""

    step: int
    mode: str
    broadcast_unit_ids: tuple[int, ...]
    chunk_tokens: dict[int, int]
    hit_eos: dict[int, bool]
    new_count: int
    duplicate_count: int
    ratio: float | None
    extracted: bool


@dataclass
class PhaseTimings:
    """Wall-clock split across the loop's phases, in seconds."""

    sampling: float = 0.0
    extraction: float = 0.0
    admission: float = 0.0


@dataclass
class RunResult:
    problem_id: str
    run_index: int
    branches: list[BranchState]
    pool: SharedPool
    scheduler: BroadcastScheduler
    steps: list[StepTrace]
    requests: list[RequestRecord]
    timings: PhaseTimings
    wall_clock: float
    step_count: int


class QueryError(RuntimeError):
    """A query aborted mid-run; the partial trace is preserved."""

    def __init__(self, message: str, partial: RunResult):
        super().__init__(message)
        self.partial = partial


def _fork_join(
    executor: ThreadPoolExecutor,
    work: Callable[[BranchState], GenerationChunk],
    branches: Sequence[BranchState],
) -> dict[int, GenerationChunk]:
    futures = {branch.branch_id: executor.submit(work, branch) for branch in branches}
    return {branch_id: future.result() for branch_id, future in futures.items()}


def run_query(
    problem: str,
    config: RunConfig,
    backend: ChatBackend,
    embedder,
    *,
    templates: PromptTemplates | None = None,
    problem_id: str = "q0",
    run_index: int = 0,
    enable_extraction: bool = True,
    enable_broadcast: bool = True,
    static_broadcast: BroadcastSet | None = None,
    extract_from_finished: bool = True,
    freerun_extraction: bool = False,
    max_workers: int | None = None,
) -> RunResult:
    """Run the full search loop for one problem.

    Feature flags select the run family while keeping one code path:
    both flags on is the collaborative search; extraction without broadcast
    is the statistics-only chunked run; both off is plain parallel sampling
    (one full-length request per branch), optionally with a ``static_broadcast``
    injected into every prompt.
    """
    config = validate_config(config)
    templates = templates or PromptTemplates.load()
    plain_sampling = not enable_extraction and not enable_broadcast

    branches = [BranchState(branch_id=i) for i in range(config.branch_count)]
    pool = SharedPool(config.dedup_threshold)
    scheduler = scheduler_from_config(config)
    broadcast_rng = derive_rng(config.seed, f"{problem_id}/run{run_index}/broadcast")

    steps: list[StepTrace] = []
    requests: list[RequestRecord] = []
    timings = PhaseTimings()
    step_count = 0
    started = time.perf_counter()

    def partial_result() -> RunResult:
        return RunResult(
            problem_id=problem_id,
            run_index=run_index,
            branches=branches,
            pool=pool,
            scheduler=scheduler,
            steps=steps,
            requests=requests,
            timings=timings,
            wall_clock=time.perf_counter() - started,
            step_count=step_count,
        )

    workers = max_workers or min(32, config.branch_count)
    try:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            _run_loop(
                problem=problem,
                config=config,
                backend=backend,
                embedder=embedder,
                templates=templates,
                problem_id=problem_id,
                branches=branches,
                pool=pool,
                scheduler=scheduler,
                broadcast_rng=broadcast_rng,
                steps=steps,
                requests=requests,
                timings=timings,
                executor=executor,
                enable_extraction=enable_extraction,
                enable_broadcast=enable_broadcast,
                static_broadcast=static_broadcast,
                extract_from_finished=extract_from_finished,
                freerun_extraction=freerun_extraction,
                plain_sampling=plain_sampling,
            )
    except BackendError as exc:
        raise QueryError(f"query {problem_id} aborted: {exc}", partial_result()) from exc

    step_count = sum(1 for t in steps if t.mode != Mode.FREERUN.label)
    return partial_result()


def _run_loop(
    *,
    problem: str,
    config: RunConfig,
    backend: ChatBackend,
    embedder,
    templates: PromptTemplates,
    problem_id: str,
    branches: list[BranchState],
    pool: SharedPool,
    scheduler: BroadcastScheduler,
    broadcast_rng,
    steps: list[StepTrace],
    requests: list[RequestRecord],
    timings: PhaseTimings,
    executor: ThreadPoolExecutor,
    enable_extraction: bool,
    enable_broadcast: bool,
    static_broadcast: BroadcastSet | None,
    extract_from_finished: bool,
    freerun_extraction: bool,
    plain_sampling: bool,
) -> None:
    sampling = config.sampling
    step = 0
    empty_broadcast = BroadcastSet(entries=(), step_issued=0)

    while any(not b.finished for b in branches):
        step += 1
        if static_broadcast is not None:
            bset = static_broadcast
        elif enable_broadcast and scheduler.broadcasting_active():
            bset = pool.sample_broadcast(config.broadcast_size, broadcast_rng, step)
        else:
            bset = empty_broadcast
        mode_label = scheduler.mode.label
        active = [b for b in branches if not b.finished]

        def generate_for(branch: BranchState) -> GenerationChunk:
            ctx = build_worker_prompt(problem, branch, bset.entries, templates)
            remaining = config.max_tokens - branch.generated_tokens
            budget = remaining if plain_sampling else min(config.chunk_tokens, remaining)
            return generate_chunk(
                backend, ctx, budget, sampling, tag=(problem_id, "gen", branch.branch_id, step)
            )

        phase_start = time.perf_counter()
        chunks = _fork_join(executor, generate_for, active)
        timings.sampling += time.perf_counter() - phase_start

        chunk_tokens: dict[int, int] = {}
        eos_flags: dict[int, bool] = {}
        for branch in active:
            chunk = chunks[branch.branch_id]
            if chunk.token_count == 0 and not chunk.hit_eos:
                raise BackendError(
                    f"branch {branch.branch_id} got an empty non-EOS chunk at step {step}"
                )
            branch.append_segment(chunk.text, chunk.token_count)
            kind = "full_prefill" if plain_sampling else "cpt_generation"
            requests.append(
                RequestRecord(
                    kind=kind,
                    prompt_tokens=chunk.prompt_tokens,
                    output_tokens=chunk.token_count,
                    effective_length=(
                        None if plain_sampling else chunk.prompt_tokens + chunk.token_count
                    ),
                )
            )
            chunk_tokens[branch.branch_id] = chunk.token_count
            eos_flags[branch.branch_id] = chunk.hit_eos
            if chunk.hit_eos:
                branch.mark_finished("eos")
            elif branch.generated_tokens >= config.max_tokens:
                branch.mark_finished("length_cap")

        if all(b.finished for b in branches):
            steps.append(
                StepTrace(
                    step=step,
                    mode=mode_label,
                    broadcast_unit_ids=tuple(u.unit_id for u in bset.entries),
                    chunk_tokens=chunk_tokens,
                    hit_eos=eos_flags,
                    new_count=0,
                    duplicate_count=0,
                    ratio=None,
                    extracted=False,
                )
            )
            break

        extracted = False
        if enable_extraction:
            extracted = True
            targets = [b for b in active if extract_from_finished or not b.finished]
            _extract_and_admit(
                problem=problem,
                config=config,
                backend=backend,
                embedder=embedder,
                templates=templates,
                problem_id=problem_id,
                pool=pool,
                step=step,
                targets=targets,
                chunks=chunks,
                requests=requests,
                timings=timings,
                executor=executor,
            )

        ratio = None
        if enable_broadcast:
            scheduler.record_step(pool.new_counts.get(step, 0))
            scheduler.window_update()
            if scheduler.window_log and scheduler.window_log[-1].step == len(scheduler.counts):
                ratio = scheduler.window_log[-1].ratio

        steps.append(
            StepTrace(
                step=step,
                mode=mode_label,
                broadcast_unit_ids=tuple(u.unit_id for u in bset.entries),
                chunk_tokens=chunk_tokens,
                hit_eos=eos_flags,
                new_count=pool.new_counts.get(step, 0),
                duplicate_count=pool.duplicate_counts.get(step, 0),
                ratio=ratio,
                extracted=extracted,
            )
        )

        if scheduler.mode is Mode.FREERUN:
            _freerun_completion(
                problem=problem,
                config=config,
                backend=backend,
                embedder=embedder,
                templates=templates,
                problem_id=problem_id,
                branches=branches,
                pool=pool,
                bset=bset,
                steps=steps,
                requests=requests,
                timings=timings,
                executor=executor,
                step=step + 1,
                enable_extraction=enable_extraction and freerun_extraction,
            )
            break


def _extract_and_admit(
    *,
    problem: str,
    config: RunConfig,
    backend: ChatBackend,
    embedder,
    templates: PromptTemplates,
    problem_id: str,
    pool: SharedPool,
    step: int,
    targets: list[BranchState],
    chunks: dict[int, GenerationChunk],
    requests: list[RequestRecord],
    timings: PhaseTimings,
    executor: ThreadPoolExecutor,
) -> None:
    """Concurrent extraction calls, then serialized fixed-order admission."""
    prior = pool.recent_entries()

    def extract_for(branch: BranchState) -> GenerationChunk:
        ctx = build_extraction_prompt(
            problem, branch, chunks[branch.branch_id].text, prior, templates
        )
        return generate_chunk(
            backend,
            ctx,
            config.chunk_tokens,
            config.sampling,
            tag=(problem_id, "ext", branch.branch_id, step),
        )

    phase_start = time.perf_counter()
    extractions = _fork_join(executor, extract_for, targets)
    timings.extraction += time.perf_counter() - phase_start

    phase_start = time.perf_counter()
    for branch in sorted(targets, key=lambda b: b.branch_id):
        reply = extractions[branch.branch_id]
        requests.append(
            RequestRecord(
                kind="cpt_extraction",
                prompt_tokens=reply.prompt_tokens,
                output_tokens=reply.token_count,
            )
        )
        for kind, text in parse_bb_write(reply.text):
            pool.admit(kind, text, embedder, branch.branch_id, step)
    timings.admission += time.perf_counter() - phase_start


def _freerun_completion(
    *,
    problem: str,
    config: RunConfig,
    backend: ChatBackend,
    embedder,
    templates: PromptTemplates,
    problem_id: str,
    branches: list[BranchState],
    pool: SharedPool,
    bset: BroadcastSet,
    steps: list[StepTrace],
    requests: list[RequestRecord],
    timings: PhaseTimings,
    executor: ThreadPoolExecutor,
    step: int,
    enable_extraction: bool,
) -> None:
    """Finish every unfinished branch with one unsynchronized request each.

    The shared block active at the final synchronized step rides along (the
    continuation semantically extends that context). Extraction over the
    free-run segments is off by default; the flag feeds analysis-only runs.
    """
    remaining = [b for b in branches if not b.finished]
    if not remaining:
        return

    def finish(branch: BranchState) -> GenerationChunk:
        ctx = build_worker_prompt(problem, branch, bset.entries, templates)
        return continue_until_done(
            backend,
            ctx,
            branch,
            config.sampling,
            config.max_tokens,
            tag=(problem_id, "freerun", branch.branch_id),
        )

    phase_start = time.perf_counter()
    chunks = _fork_join(executor, finish, remaining)
    timings.sampling += time.perf_counter() - phase_start

    chunk_tokens: dict[int, int] = {}
    eos_flags: dict[int, bool] = {}
    for branch in sorted(remaining, key=lambda b: b.branch_id):
        chunk = chunks[branch.branch_id]
        requests.append(
            RequestRecord(
                kind="cpt_generation",
                prompt_tokens=chunk.prompt_tokens,
                output_tokens=chunk.token_count,
                effective_length=chunk.prompt_tokens + chunk.token_count,
            )
        )
        chunk_tokens[branch.branch_id] = chunk.token_count
        eos_flags[branch.branch_id] = chunk.hit_eos

    if enable_extraction:
        nonempty = [b for b in remaining if chunks[b.branch_id].text]
        _extract_and_admit(
            problem=problem,
            config=config,
            backend=backend,
            embedder=embedder,
            templates=templates,
            problem_id=problem_id,
            pool=pool,
            step=step,
            targets=nonempty,
            chunks=chunks,
            requests=requests,
            timings=timings,
            executor=executor,
        )

    steps.append(
        StepTrace(
            step=step,
            mode=Mode.FREERUN.label,
            broadcast_unit_ids=tuple(u.unit_id for u in bset.entries),
            chunk_tokens=chunk_tokens,
            hit_eos=eos_flags,
            new_count=pool.new_counts.get(step, 0),
            duplicate_count=pool.duplicate_counts.get(step, 0),
            ratio=None,
            extracted=enable_extraction,
        )
    )


@dataclass(frozen=True)
class QueryFailure:
    problem_id: str
    run_index: int
    error: str


@dataclass
class BatchResult:
    results: list[RunResult] = field(default_factory=list)
    failures: list[QueryFailure] = field(default_factory=list)


def run_batch(
    problems: Sequence,
    config: RunConfig,
    backend: ChatBackend,
    embedder,
    repeats: int = 8,
    *,
    templates: PromptTemplates | None = None,
    parallel_queries: int = 1,
    **run_flags,
) -> BatchResult:
    """Independent repeated runs over a problem list.

    Each (problem, run) pair gets its own pool, scheduler, and derived seed
    streams. Individual query failures are recorded and the batch continues.
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    templates = templates or PromptTemplates.load()
    jobs = [(problem, run_index) for problem in problems for run_index in range(repeats)]

    def execute(job) -> RunResult:
        problem, run_index = job
        return run_query(
            problem.statement,
            config,
            backend,
            embedder,
            templates=templates,
            problem_id=problem.problem_id,
            run_index=run_index,
            **run_flags,
        )

    batch = BatchResult()
    outcomes: dict[tuple[str, int], RunResult | QueryFailure] = {}
    if parallel_queries > 1:
        with ThreadPoolExecutor(max_workers=parallel_queries) as executor:
            futures = {
                (job[0].problem_id, job[1]): executor.submit(execute, job) for job in jobs
            }
            for key, future in futures.items():
                try:
                    outcomes[key] = future.result()
                except QueryError as exc:
                    outcomes[key] = QueryFailure(key[0], key[1], str(exc))
    else:
        for job in jobs:
            key = (job[0].problem_id, job[1])
            try:
                outcomes[key] = execute(job)
            except QueryError as exc:
                logger.error("query %s run %d failed: %s", key[0], key[1], exc)
                outcomes[key] = QueryFailure(key[0], key[1], str(exc))

    for problem, run_index in jobs:
        outcome = outcomes[(problem.problem_id, run_index)]
        if isinstance(outcome, QueryFailure):
            batch.failures.append(outcome)
        else:
            batch.results.append(outcome)
    return batch
