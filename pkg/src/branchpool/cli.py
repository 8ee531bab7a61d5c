"""Command-line entry point.

Subcommands: ``run`` (collaborative search), ``baseline`` (plain parallel
sampling), ``inject`` (plain sampling with a static injected note block),
``analyze`` (per-step discovery statistics over finished runs), ``cost``
(component FLOPs/latency tables), ``theory`` (numerical identity checks and
curves), and ``selftest`` (the scripted end-to-end scenario plus the theory
checks in one shot).

Exit codes: 0 success, 1 query/check failures, 2 usage, 3 bad config or
unknown model spec, 4 unreadable dataset/fixture, 5 backend not configured.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .backend import BackendError, HttpChatBackend, PromptTemplates
from .core import (
    ConfigError,
    RunConfig,
    apply_overrides,
    derive_rng,
    load_config,
    parse_override_pairs,
)
from .cost import (
    GENERATION_MODES,
    aggregate_sq,
    flops_total,
    get_model_spec,
    ledger_from_run,
    load_registry,
    to_pflops,
)
from .embedding import ENV_EMBED_URL, MockEmbedder, RemoteEmbedder
from .harness import (
    extract_answer,
    load_problems,
    offline_inject,
    info_statistics,
    stats_from_report,
    summarize_batch,
)
from .orchestrator import run_batch
from .pool import load_pool_dump
from .report import (
    normalize_report,
    run_report,
    write_cost_table,
    write_gaussian_curves,
    write_info_stats,
    write_manifest,
    write_metrics,
    write_run_report,
    write_width_curves,
)
from .scenario import build_scenario, load_fixture
from . import theory

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATASET = 4
EXIT_BACKEND = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="branchpool",
        description="Parallel branch search with a shared deduplicated note pool.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run config file (JSON)")
        p.add_argument("--dataset", help="line-delimited problem file")
        p.add_argument("--scripted", help="scripted fixture file (offline backend)")
        p.add_argument("--output", default="runs", help="output directory")
        p.add_argument("--repeats", type=int, default=8, help="independent runs per problem")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY=VALUE",
            help="config override (full names or K/C/M/W aliases); repeatable",
        )
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument(
            "--embedder", choices=("auto", "mock", "remote"), default="auto",
            help="dedup embedding provider (scripted runs always use mock)",
        )
        p.add_argument("--parallel-queries", type=int, default=1)
        p.add_argument("--model-spec", default="toy", help="model spec for FLOPs in metrics")
        p.add_argument("--registry", help="extra model-spec registry file (JSON)")

    run_p = sub.add_parser("run", help="collaborative parallel search")
    add_run_args(run_p)
    run_p.add_argument(
        "--no-broadcast", action="store_true",
        help="extract and pool but never share (isolation-statistics protocol)",
    )
    run_p.add_argument(
        "--freerun-extraction", action="store_true",
        help="also extract notes from free-run segments (statistics only)",
    )

    base_p = sub.add_parser("baseline", help="plain parallel sampling, no sharing")
    add_run_args(base_p)

    inject_p = sub.add_parser("inject", help="plain sampling with injected pool notes")
    add_run_args(inject_p)
    inject_p.add_argument("--pool-dump", required=True, help="pool dump from a finished run")
    inject_p.add_argument("--ratio", type=int, required=True, help="percent of pool to inject")

    analyze_p = sub.add_parser("analyze", help="per-step discovery statistics over run reports")
    analyze_p.add_argument("--runs", required=True, help="directory of run reports")
    analyze_p.add_argument("--output", default="analysis")

    cost_p = sub.add_parser("cost", help="component FLOPs and latency tables")
    cost_p.add_argument("--runs", required=True, help="directory of run reports")
    cost_p.add_argument("--model-spec", required=True)
    cost_p.add_argument("--registry", help="extra model-spec registry file (JSON)")
    cost_p.add_argument("--generation-mode", choices=GENERATION_MODES, default="reprefill")
    cost_p.add_argument("--output", default="cost")

    theory_p = sub.add_parser("theory", help="numerical verification and curves")
    theory_p.add_argument("--trials", type=int, default=100)
    theory_p.add_argument("--k-max", type=int, default=64)
    theory_p.add_argument("--rho-grid", default="0,0.25,0.5,1")
    theory_p.add_argument("--mc-samples", type=int, default=100_000)
    theory_p.add_argument("--seed", type=int, default=0)
    theory_p.add_argument("--output", default="theory")
    theory_p.add_argument(
        "--perturb", action="store_true",
        help="deliberately bias the closed form (negative control; must fail)",
    )

    self_p = sub.add_parser("selftest", help="scripted scenario + theory checks")
    self_p.add_argument("--output", default="selftest")
    self_p.add_argument("--trials", type=int, default=100)

    return parser


def _make_embedder(choice: str):
    if choice == "mock":
        return MockEmbedder()
    if choice == "remote":
        return RemoteEmbedder.from_env()
    if os.environ.get(ENV_EMBED_URL):
        return RemoteEmbedder.from_env()
    return MockEmbedder()


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config)
    overrides = parse_override_pairs(args.override)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def cmd_run(args, *, enable_extraction: bool, enable_broadcast: bool) -> int:
    try:
        config = _load_run_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    templates = PromptTemplates.load()
    try:
        if args.scripted:
            problems, backend = load_fixture(args.scripted)
            embedder = MockEmbedder()
        else:
            if not args.dataset:
                print("error: --dataset is required without --scripted", file=sys.stderr)
                return EXIT_USAGE
            problems = load_problems(args.dataset)
            embedder = _make_embedder(args.embedder)
            backend = HttpChatBackend.from_env()
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot load inputs: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND

    run_flags: dict = {
        "enable_extraction": enable_extraction,
        "enable_broadcast": enable_broadcast,
    }
    if getattr(args, "freerun_extraction", False):
        run_flags["freerun_extraction"] = True
    static_note = None
    if getattr(args, "pool_dump", None) is not None:
        try:
            units = load_pool_dump(args.pool_dump, embedder)
        except (OSError, ValueError) as exc:
            print(f"error: cannot load pool dump: {exc}", file=sys.stderr)
            return EXIT_DATASET
        rng = derive_rng(config.seed, "inject")
        injected = offline_inject(units, args.ratio, rng)
        run_flags["static_broadcast"] = injected
        static_note = f"injected {len(injected.entries)} of {len(units)} pool notes"

    out_dir = Path(args.output)
    write_manifest(
        out_dir,
        args.command,
        config=config,
        seed=config.seed,
        templates=templates,
        version=__version__,
        extra={
            "dataset": args.dataset,
            "scripted": args.scripted,
            "overrides": args.override,
            "repeats": args.repeats,
            "injection": static_note,
        },
    )

    batch = run_batch(
        problems,
        config,
        backend,
        embedder,
        repeats=args.repeats,
        templates=templates,
        parallel_queries=args.parallel_queries,
        **run_flags,
    )

    per_run_stats = {}
    for result in batch.results:
        answers = [extract_answer(b.history_text()) for b in result.branches]
        write_run_report(result, config, answers, out_dir)
        stats = info_statistics(result)
        if stats:
            per_run_stats[(result.problem_id, result.run_index)] = stats

    summary = summarize_batch(batch.results, problems)
    summary["failures"] = [
        {"problem_id": f.problem_id, "run_index": f.run_index, "error": f.error}
        for f in batch.failures
    ]
    try:
        registry = load_registry(args.registry)
        spec = get_model_spec(args.model_spec, registry)
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    total_sq = aggregate_sq(r for result in batch.results for r in result.requests)
    summary["flops_total_pflops"] = to_pflops(flops_total(total_sq, spec).total)
    summary["model_spec"] = args.model_spec
    write_metrics(summary, out_dir)
    if per_run_stats:
        write_info_stats(per_run_stats, out_dir)

    for problem in summary.get("problems", []):
        print(
            f"{problem['problem_id']}: pass@1={problem['pass_at_1_mean']:.4f} "
            f"mv={problem['majority_vote_mean']:.4f} over {len(problem['runs'])} runs"
        )
    print(f"wrote {len(batch.results)} run reports to {out_dir}")
    if batch.failures:
        for failure in batch.failures:
            print(
                f"FAILED {failure.problem_id} run {failure.run_index}: {failure.error}",
                file=sys.stderr,
            )
        return EXIT_FAILURE
    return EXIT_OK


def _iter_reports(runs_dir: Path):
    for path in sorted(runs_dir.glob("*.json")):
        if path.name in ("manifest.json", "metrics.json"):
            continue
        try:
            report = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"unreadable report {path}: {exc}") from None
        if isinstance(report, dict) and "problem_id" in report and "steps" in report:
            yield path, report


def cmd_analyze(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        print(f"error: not a directory: {runs_dir}", file=sys.stderr)
        return EXIT_DATASET
    per_run_stats = {}
    try:
        for _, report in _iter_reports(runs_dir):
            stats = stats_from_report(report)
            if stats:
                per_run_stats[(report["problem_id"], report["run_index"])] = stats
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    csv_path, fig_path = write_info_stats(per_run_stats, args.output)
    write_manifest(
        Path(args.output), "analyze", config=None, seed=None, templates=None,
        version=__version__, extra={"runs": str(runs_dir)},
    )
    print(f"analyzed {len(per_run_stats)} runs; wrote {csv_path} and {fig_path}")
    return EXIT_OK


def cmd_cost(args) -> int:
    try:
        registry = load_registry(args.registry)
        spec = get_model_spec(args.model_spec, registry)
    except (KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        print(f"error: not a directory: {runs_dir}", file=sys.stderr)
        return EXIT_DATASET

    rows = []
    try:
        for _, report in _iter_reports(runs_dir):
            ledger = ledger_from_report(report, spec, args.generation_mode)
            rows.append(
                {
                    "problem_id": report["problem_id"],
                    "run_index": report["run_index"],
                    "sampling_pflops": to_pflops(ledger.sampling_flops),
                    "extraction_pflops": to_pflops(ledger.extraction_flops),
                    "sampling_latency_s": ledger.sampling_latency,
                    "extraction_latency_s": ledger.extraction_latency,
                    "dedup_latency_s": ledger.dedup_latency,
                }
            )
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATASET

    csv_path, fig_path = write_cost_table(rows, args.output)
    write_manifest(
        Path(args.output), "cost", config=None, seed=None, templates=None,
        version=__version__,
        extra={"runs": str(runs_dir), "model_spec": args.model_spec,
               "generation_mode": args.generation_mode},
    )
    header = f"{'problem/run':<28} {'sampling PF':>12} {'extract PF':>12} {'sample s':>9} {'extract s':>9} {'dedup s':>9}"
    print(header)
    for row in rows:
        print(
            f"{row['problem_id'] + '/' + str(row['run_index']):<28} "
            f"{row['sampling_pflops']:>12.6g} {row['extraction_pflops']:>12.6g} "
            f"{row['sampling_latency_s']:>9.3f} {row['extraction_latency_s']:>9.3f} "
            f"{row['dedup_latency_s']:>9.3f}"
        )
    print(f"wrote {csv_path} and {fig_path}")
    return EXIT_OK


def ledger_from_report(report: dict, spec, generation_mode: str):
    """Adapter: rebuild the cost view of a serialized run report."""
    from .cost import RequestRecord
    from .orchestrator import PhaseTimings

    class _View:
        pass

    view = _View()
    view.requests = [
        RequestRecord(
            kind=r["kind"],
            prompt_tokens=r["prompt_tokens"],
            output_tokens=r["output_tokens"],
            cached_tokens=r.get("cached_tokens"),
            effective_length=r.get("effective_length"),
        )
        for r in report["requests"]
    ]
    timings = report.get("timings", {})
    view.timings = PhaseTimings(
        sampling=timings.get("sampling", 0.0),
        extraction=timings.get("extraction", 0.0),
        admission=timings.get("admission", 0.0),
    )
    return ledger_from_run(view, spec, generation_mode)


def cmd_theory(args) -> int:
    rho_grid = []
    try:
        for token in str(args.rho_grid).split(","):
            token = token.strip()
            if token:
                rho_grid.append(float(token))
    except ValueError:
        print(f"error: bad --rho-grid: {args.rho_grid!r}", file=sys.stderr)
        return EXIT_USAGE

    checks = theory_checks(
        trials=args.trials,
        k_max=args.k_max,
        rho_grid=rho_grid,
        mc_samples=args.mc_samples,
        seed=args.seed,
        perturb=args.perturb,
    )

    k_values = sorted({1, 2, 4, 8, 16, 32} | {args.k_max})
    k_values = [k for k in k_values if 1 <= k <= args.k_max]
    out_dir = Path(args.output)
    write_width_curves(k_values, [r for r in rho_grid], out_dir)
    write_gaussian_curves(k_values, 1.0, [0.0, 0.5, 1.0, 4.0], out_dir)
    write_manifest(
        out_dir, "theory", config=None, seed=args.seed, templates=None,
        version=__version__,
        extra={"trials": args.trials, "k_max": args.k_max, "rho_grid": rho_grid},
    )

    failed = False
    print(f"{'check':<44} {'worst':>12} {'bound':>10} result")
    for name, worst, bound, ok in checks:
        print(f"{name:<44} {worst:>12.3e} {bound:>10.0e} {'PASS' if ok else 'FAIL'}")
        failed = failed or not ok
    print(f"curves written to {out_dir}")
    return EXIT_FAILURE if failed else EXIT_OK


def theory_checks(
    *,
    trials: int,
    k_max: int,
    rho_grid: list[float],
    mc_samples: int,
    seed: int,
    perturb: bool = False,
) -> list[tuple[str, float, float, bool]]:
    """Run every numerical identity check; returns (name, worst, bound, ok) rows."""
    bias = 1e-3 if perturb else 0.0
    rows: list[tuple[str, float, float, bool]] = []

    rng = derive_rng(seed, "theory/tc-identity")
    worst = 0.0
    for _ in range(trials):
        paths = int(rng.integers(2, 4))
        arities = [int(rng.integers(2, 5)) for _ in range(paths + 1)]
        joint = theory.random_joint(arities, rng)
        worst = max(worst, theory.verify_tc_identity(joint).residual)
    rows.append(("redundancy vs total correlation", worst, theory.IDENTITY_TOLERANCE,
                 worst <= theory.IDENTITY_TOLERANCE))

    rng = derive_rng(seed, "theory/collab-gain")
    worst = 0.0
    for _ in range(trials):
        answer_arity = int(rng.integers(2, 5))
        paths_a = int(rng.integers(2, 4))
        paths_b = int(rng.integers(2, 4))
        joint_a = theory.random_joint(
            [answer_arity] + [int(rng.integers(2, 5)) for _ in range(paths_a)], rng
        )
        joint_b = theory.random_joint(
            [answer_arity] + [int(rng.integers(2, 5)) for _ in range(paths_b)], rng
        )
        worst = max(worst, theory.collaborative_gain(joint_a, joint_b).residual)
    rows.append(("collaborative gain decomposition", worst, theory.IDENTITY_TOLERANCE,
                 worst <= theory.IDENTITY_TOLERANCE))

    rng = derive_rng(seed, "theory/nonneg")
    worst = 0.0
    for _ in range(trials):
        paths = int(rng.integers(2, 4))
        joint = theory.product_channel_joint(
            int(rng.integers(2, 5)), [int(rng.integers(2, 5)) for _ in range(paths)], rng
        )
        quantities = theory.info_quantities(joint)
        worst = min(worst, quantities.redundant)
        worst = min(worst, theory.verify_tc_identity(joint).tc_given_answer)
    rows.append(("redundancy nonnegative given independence", -worst, 1e-10, -worst <= 1e-10))

    worst = 0.0
    for k in range(1, k_max + 1):
        for sigma_u2 in (0.5, 1.0, 2.0):
            for sigma_c2 in (0.0, 0.5, 1.0, 4.0):
                model = theory.GaussianRedundancyModel(k, sigma_u2, sigma_c2)
                closed = theory.gaussian_mi_closed_form(model) + bias
                oracle = theory.gaussian_mi_oracle(model)
                worst = max(worst, abs(closed - oracle) / closed)
    rows.append(("gaussian closed form vs matrix oracle", worst, 1e-9, worst <= 1e-9))

    worst = 0.0
    for k in range(1, k_max + 1):
        worst = max(worst, abs(theory.effective_width(k, 0.0) - k))
        worst = max(worst, abs(theory.effective_width(k, 1.0) - 1.0))
    rows.append(("effective width endpoints exact", worst, 1e-300, worst == 0.0))

    worst = 0.0
    for rho in (0.25, 0.5, 1.0):
        worst = max(worst, abs(theory.effective_width(10**6, rho) - 1.0 / rho))
    rows.append(("effective width large-K limit", worst, 1e-3, worst <= 1e-3))

    rng = derive_rng(seed, "theory/monte-carlo")
    worst = 0.0
    points = [(1, 1.0, 0.0), (2, 1.0, 0.5), (4, 0.5, 1.0), (8, 2.0, 0.5), (16, 1.0, 4.0)]
    for k, sigma_u2, sigma_c2 in points:
        model = theory.GaussianRedundancyModel(k, sigma_u2, sigma_c2)
        estimate, std_error = theory.gaussian_mi_monte_carlo(model, mc_samples, rng)
        closed = theory.gaussian_mi_closed_form(model) + bias
        worst = max(worst, abs(estimate - closed) / (3.0 * std_error))
    rows.append(("monte carlo estimate within 3 SE", worst, 1.0, worst <= 1.0))

    worst = 0.0
    for k in (1, 2, 4, 8, 16, 32, k_max):
        for sigma_u2 in (0.5, 1.0, 2.0):
            for sigma_c2 in (0.0, 0.5, 1.0, 4.0):
                model = theory.GaussianRedundancyModel(k, sigma_u2, sigma_c2)
                gap = abs(
                    theory.gaussian_mi_closed_form(model) - theory.gaussian_mi_via_width(model)
                )
                worst = max(worst, gap)
    rows.append(("width-form equivalence", worst, 1e-12, worst <= 1e-12))

    return rows


def cmd_selftest(args) -> int:
    from .embedding import MockEmbedder as _Mock
    from .orchestrator import run_query

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario = build_scenario()
    problem = scenario.problems[0]
    write_manifest(
        out_dir, "selftest", config=scenario.config, seed=scenario.config.seed,
        templates=PromptTemplates.load(), version=__version__,
        extra={"trials": args.trials},
    )
    failed = False

    def check(name: str, ok: bool) -> None:
        nonlocal failed
        print(f"{name:<44} {'PASS' if ok else 'FAIL'}")
        failed = failed or not ok

    reports = []
    for _ in range(2):
        result = run_query(
            problem.statement,
            scenario.config,
            scenario.backend(),
            _Mock(),
            problem_id=problem.problem_id,
        )
        answers = [extract_answer(b.history_text()) for b in result.branches]
        reports.append(normalize_report(run_report(result, scenario.config, answers)))
    from .scenario import EXPECTED_NEW_COUNTS, EXPECTED_POOL_SIZE

    check("scenario replays identically", reports[0] == reports[1])
    check("scenario new-count sequence", reports[0]["scheduler"]["counts"] == EXPECTED_NEW_COUNTS)
    transitions = reports[0]["scheduler"]["transitions"]
    check(
        "scenario mode transitions",
        [(t["step"], t["new_mode"]) for t in transitions] == [(6, "broadcast"), (9, "freerun")],
    )
    check("scenario pool size", len(reports[0]["pool"]["entries"]) == EXPECTED_POOL_SIZE)
    check("scenario majority answer", _majority(reports[0]["answers"]) == problem.gold_answer)
    (out_dir / "selftest_report.json").write_text(
        json.dumps(reports[0], indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )

    for name, worst, bound, ok in theory_checks(
        trials=args.trials, k_max=32, rho_grid=[0.0, 0.25, 0.5, 1.0],
        mc_samples=50_000, seed=0, perturb=False,
    ):
        check(name, ok)

    print("selftest:", "FAIL" if failed else "PASS")
    return EXIT_FAILURE if failed else EXIT_OK


def _majority(answers):
    from .harness import majority_vote

    return majority_vote(answers)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "run":
        return cmd_run(
            args,
            enable_extraction=True,
            enable_broadcast=not getattr(args, "no_broadcast", False),
        )
    if args.command == "baseline":
        return cmd_run(args, enable_extraction=False, enable_broadcast=False)
    if args.command == "inject":
        return cmd_run(args, enable_extraction=False, enable_broadcast=False)
    if args.command == "analyze":
        return cmd_analyze(args)
    if args.command == "cost":
        return cmd_cost(args)
    if args.command == "theory":
        return cmd_theory(args)
    if args.command == "selftest":
        return cmd_selftest(args)
    parser.error(f"unknown command {args.command!r}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
