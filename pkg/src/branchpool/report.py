"""Run reports, metrics files, and figures.

Reports are deterministic JSON documents (timing fields are the only
nondeterministic content; ``normalize_report`` zeroes them for golden
comparisons). Every tabular output is written as a delimited file with a
rendered figure alongside.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .backend import PromptTemplates
from .core import RunConfig
from .harness import StepInfoStats
from .orchestrator import RunResult

_UNSAFE_RE = re.compile(r"[^A-Za-z0-9._-]+")


def _safe_name(name: str) -> str:
    return _UNSAFE_RE.sub("-", name)


def report_filename(problem_id: str, run_index: int) -> str:
    return f"{_safe_name(problem_id)}__run{run_index}.json"


def run_report(result: RunResult, config: RunConfig, answers: list[str | None]) -> dict:
    """Structured document capturing one run end to end."""
    return {
        "problem_id": result.problem_id,
        "run_index": result.run_index,
        "config": config.to_dict(),
        "step_count": result.step_count,
        "final_mode": result.scheduler.mode.label,
        "steps": [
            {
                "step": t.step,
                "mode": t.mode,
                "broadcast_unit_ids": list(t.broadcast_unit_ids),
                "chunk_tokens": {str(k): t.chunk_tokens[k] for k in sorted(t.chunk_tokens)},
                "hit_eos": {str(k): t.hit_eos[k] for k in sorted(t.hit_eos)},
                "new_count": t.new_count,
                "duplicate_count": t.duplicate_count,
                "ratio": t.ratio,
                "extracted": t.extracted,
            }
            for t in result.steps
        ],
        "branches": [
            {
                "branch_id": b.branch_id,
                "finish_reason": b.finish_reason,
                "generated_tokens": b.generated_tokens,
                "segments": [{"text": s.text, "tokens": s.token_count} for s in b.history],
            }
            for b in result.branches
        ],
        "answers": answers,
        "pool": {
            "entries": [
                {
                    "unit_id": u.unit_id,
                    "step": u.step_admitted,
                    "branch": u.source_branch,
                    "kind": u.kind,
                    "text": u.text,
                }
                for u in result.pool.entries
            ],
            "new_counts": {str(k): v for k, v in sorted(result.pool.new_counts.items())},
            "duplicate_counts": {
                str(k): v for k, v in sorted(result.pool.duplicate_counts.items())
            },
            "admissions": [
                {
                    "step": e.step,
                    "branch": e.source_branch,
                    "kind": e.kind,
                    "text": e.text,
                    "max_similarity": e.max_similarity,
                    "admitted": e.admitted,
                    "unit_id": e.unit_id,
                }
                for e in result.pool.admission_log
            ],
        },
        "scheduler": {
            "counts": list(result.scheduler.counts),
            "reference_gain": result.scheduler.reference_gain,
            "windows": [
                {"index": w.index, "step": w.step, "gain": w.gain, "ratio": w.ratio}
                for w in result.scheduler.window_log
            ],
            "transitions": [
                {
                    "step": t.step,
                    "old_mode": t.old_mode.label,
                    "new_mode": t.new_mode.label,
                    "ratio": t.ratio,
                }
                for t in result.scheduler.transition_log
            ],
        },
        "requests": [
            {
                "kind": r.kind,
                "prompt_tokens": r.prompt_tokens,
                "output_tokens": r.output_tokens,
                "cached_tokens": r.cached_tokens,
                "effective_length": r.effective_length,
            }
            for r in result.requests
        ],
        "timings": {
            "sampling": result.timings.sampling,
            "extraction": result.timings.extraction,
            "admission": result.timings.admission,
        },
        "wall_clock": result.wall_clock,
    }


def normalize_report(report: dict) -> dict:
    """Copy with all wall-clock fields zeroed, for golden comparison."""
    normalized = json.loads(json.dumps(report))
    normalized["wall_clock"] = 0.0
    normalized["timings"] = {key: 0.0 for key in normalized.get("timings", {})}
    return normalized


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, ensure_ascii=False) + "\n"


def write_run_report(
    result: RunResult, config: RunConfig, answers: list[str | None], out_dir: str | Path
) -> Path:
    """Write the report JSON plus the line-delimited pool dump next to it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / report_filename(result.problem_id, result.run_index)
    path.write_text(dump_report(run_report(result, config, answers)), encoding="utf-8")
    pool_path = path.with_suffix("").with_suffix(".pool.jsonl")
    pool_path.write_text(
        "".join(line + "\n" for line in result.pool.dump_lines()), encoding="utf-8"
    )
    return path


def write_manifest(
    out_dir: str | Path,
    command: str,
    *,
    config: RunConfig | None,
    seed: int | None,
    templates: PromptTemplates | None,
    version: str,
    extra: dict | None = None,
) -> Path:
    """Replay manifest: everything needed to rerun the command."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": version,
        "seed": seed,
        "config": config.to_dict() if config is not None else None,
        "template_hashes": templates.hashes() if templates is not None else None,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def write_metrics(summary: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.json"
    path.write_text(json.dumps(summary, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def write_info_stats(
    per_run_stats: dict[tuple[str, int], list[StepInfoStats]], out_dir: str | Path
) -> tuple[Path, Path]:
    """Per-step discovery statistics: CSV of every run plus a mean-curve figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "info_stats.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["problem_id", "run_index", "step", "new", "duplicate", "new_per_10240", "duplicate_per_10240"]
        )
        for (problem_id, run_index), stats in sorted(per_run_stats.items()):
            for s in stats:
                writer.writerow(
                    [problem_id, run_index, s.step, s.new_count, s.duplicate_count,
                     f"{s.normalized_new:.6f}", f"{s.normalized_duplicate:.6f}"]
                )

    by_step: dict[int, list[tuple[float, float]]] = {}
    for stats in per_run_stats.values():
        for s in stats:
            by_step.setdefault(s.step, []).append((s.normalized_new, s.normalized_duplicate))
    fig_path = out / "info_stats.png"
    fig, ax = plt.subplots(figsize=(6, 4))
    if by_step:
        steps = sorted(by_step)
        mean_new = [sum(v[0] for v in by_step[s]) / len(by_step[s]) for s in steps]
        mean_dup = [sum(v[1] for v in by_step[s]) / len(by_step[s]) for s in steps]
        ax.plot(steps, mean_new, marker="o", label="new")
        ax.plot(steps, mean_dup, marker="s", label="duplicate")
        ax.legend()
    ax.set_xlabel("search step")
    ax.set_ylabel("units per 10,240 generated tokens")
    ax.set_title("Information discovery per step")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return csv_path, fig_path


def write_cost_table(rows: list[dict], out_dir: str | Path) -> tuple[Path, Path]:
    """Component cost table (CSV) plus a grouped bar figure of latencies."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "cost_components.csv"
    fields = [
        "problem_id",
        "run_index",
        "sampling_pflops",
        "extraction_pflops",
        "sampling_latency_s",
        "extraction_latency_s",
        "dedup_latency_s",
    ]
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})

    fig_path = out / "cost_components.png"
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        labels = [f"{r['problem_id']}/{r['run_index']}" for r in rows]
        x = range(len(rows))
        width = 0.27
        ax.bar([i - width for i in x], [r["sampling_latency_s"] for r in rows], width, label="sampling")
        ax.bar(list(x), [r["extraction_latency_s"] for r in rows], width, label="extraction")
        ax.bar([i + width for i in x], [r["dedup_latency_s"] for r in rows], width, label="dedup & filter")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.legend()
    ax.set_ylabel("latency (s)")
    ax.set_title("Component-wise latency")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return csv_path, fig_path


def write_width_curves(
    k_values: list[int], rho_grid: list[float], out_dir: str | Path
) -> tuple[Path, Path]:
    """Effective-width curves over path count for each correlation level."""
    from .theory import effective_width

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "effective_width.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["K", "rho", "K_eff"])
        for rho in rho_grid:
            for k in k_values:
                writer.writerow([k, rho, f"{effective_width(k, rho):.9g}"])

    fig_path = out / "effective_width.png"
    fig, ax = plt.subplots(figsize=(6, 4))
    for rho in rho_grid:
        ax.plot(k_values, [effective_width(k, rho) for k in k_values], label=f"rho={rho:g}")
    ax.set_xlabel("parallel paths K")
    ax.set_ylabel("effective width")
    ax.set_xscale("log", base=2)
    ax.legend()
    ax.set_title("Effective parallel width vs correlation")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return csv_path, fig_path


def write_gaussian_curves(
    k_values: list[int],
    sigma_u2: float,
    sigma_c2_grid: list[float],
    out_dir: str | Path,
) -> tuple[Path, Path]:
    """Closed-form vs numeric mutual information over path count."""
    from .theory import GaussianRedundancyModel, gaussian_mi_closed_form, gaussian_mi_oracle

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "gaussian_mi.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["K", "sigma_u2", "sigma_c2", "mi_closed_form", "mi_oracle"])
        for sigma_c2 in sigma_c2_grid:
            for k in k_values:
                model = GaussianRedundancyModel(k, sigma_u2, sigma_c2)
                writer.writerow(
                    [k, sigma_u2, sigma_c2,
                     f"{gaussian_mi_closed_form(model):.12g}", f"{gaussian_mi_oracle(model):.12g}"]
                )

    fig_path = out / "gaussian_mi.png"
    fig, ax = plt.subplots(figsize=(6, 4))
    for sigma_c2 in sigma_c2_grid:
        values = [
            gaussian_mi_closed_form(GaussianRedundancyModel(k, sigma_u2, sigma_c2))
            for k in k_values
        ]
        ax.plot(k_values, values, label=f"common noise {sigma_c2:g}")
    ax.set_xlabel("parallel paths K")
    ax.set_ylabel("mutual information (nats)")
    ax.set_xscale("log", base=2)
    ax.legend()
    ax.set_title("Pooled information vs path count")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return csv_path, fig_path
