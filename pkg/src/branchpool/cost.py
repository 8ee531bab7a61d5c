"""Analytic FLOPs accounting for chat-model inference strategies.

Every request contributes an effective linear token term S (linear
projections, MLP, vocabulary head) and an effective quadratic attention term
Q. The per-kind rules differ by caching assumptions: full prefills pay the
square of the whole sequence, cached extraction pays only cross terms, and
segmented decoding pays incrementally against its cache. S/Q aggregates are
exact integers; FLOPs conversion is the only floating-point step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

REQUEST_KINDS = (
    "full_prefill",
    "cpt_generation",
    "cpt_extraction",
    "leap_segment",
    "deepconf_completion",
)

GENERATION_MODES = ("reprefill", "cached")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture numbers the estimator needs.

    ``ffn_active_dim`` is the FFN intermediate dimension actually active per
    token: the plain intermediate size for dense models, and the per-expert
    size pre-multiplied by the number of activated experts for MoE models.
    """

    hidden_size: int
    num_layers: int
    num_heads: int
    num_kv_heads: int
    vocab_size: int
    ffn_active_dim: int

    def __post_init__(self) -> None:
        for name in ("hidden_size", "num_layers", "num_heads", "num_kv_heads", "vocab_size", "ffn_active_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.num_kv_heads > self.num_heads:
            raise ValueError("num_kv_heads cannot exceed num_heads")


@dataclass(frozen=True)
class RequestRecord:
    """Token accounting for one model request."""

    kind: str
    prompt_tokens: int
    output_tokens: int
    cached_tokens: int | None = None       # leap_segment only
    effective_length: int | None = None    # cpt_generation only

    def __post_init__(self) -> None:
        if self.kind not in REQUEST_KINDS:
            raise ValueError(f"unknown request kind: {self.kind!r}")
        if self.prompt_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be nonnegative")
        if self.kind == "leap_segment":
            if self.cached_tokens is None or self.cached_tokens < 0:
                raise ValueError("leap_segment requires nonnegative cached_tokens")
        elif self.cached_tokens is not None:
            raise ValueError(f"cached_tokens is only valid for leap_segment, not {self.kind}")
        if self.kind == "cpt_generation":
            if self.effective_length is None or self.effective_length < 0:
                raise ValueError("cpt_generation requires nonnegative effective_length")
        elif self.effective_length is not None:
            raise ValueError(f"effective_length is only valid for cpt_generation, not {self.kind}")


@dataclass(frozen=True)
class SQAggregate:
    """Effective linear (S) and quadratic (Q) token terms; additive."""

    S: int
    Q: int

    def __add__(self, other: "SQAggregate") -> "SQAggregate":
        return SQAggregate(self.S + other.S, self.Q + other.Q)


SQ_ZERO = SQAggregate(0, 0)


def sq_of_request(record: RequestRecord, generation_mode: str = "reprefill") -> SQAggregate:
    """Exact S/Q for one request under its kind's counting rule.

    ``generation_mode`` affects only cpt_generation records: "reprefill"
    charges the step's full effective length both linearly and quadratically;
    "cached" charges like extraction (context already resident), for
    sensitivity analysis.
    """
    if generation_mode not in GENERATION_MODES:
        raise ValueError(f"unknown generation mode: {generation_mode!r}")
    p, o = record.prompt_tokens, record.output_tokens
    if record.kind in ("full_prefill", "deepconf_completion"):
        total = p + o
        return SQAggregate(total, total * total)
    if record.kind == "cpt_generation":
        if generation_mode == "cached":
            return SQAggregate(o, 2 * p * o + o * o)
        length = record.effective_length
        assert length is not None
        return SQAggregate(length, length * length)
    if record.kind == "cpt_extraction":
        return SQAggregate(o, 2 * p * o + o * o)
    # leap_segment: incremental decoding against cached_tokens of context.
    cached = record.cached_tokens
    assert cached is not None
    x = p + o
    return SQAggregate(x, x * (2 * cached + x))


def aggregate_sq(records: Iterable[RequestRecord], generation_mode: str = "reprefill") -> SQAggregate:
    total = SQ_ZERO
    for record in records:
        total = total + sq_of_request(record, generation_mode)
    return total


@dataclass(frozen=True)
class FlopsBreakdown:
    attention: float
    mlp: float
    vocab: float

    @property
    def total(self) -> float:
        return self.attention + self.mlp + self.vocab


def flops_total(agg: SQAggregate, spec: ModelSpec) -> FlopsBreakdown:
    """The unified estimator: attention + MLP + vocabulary projection."""
    h = spec.hidden_size
    layers = spec.num_layers
    ratio = spec.num_kv_heads / spec.num_heads
    attention = 2.0 * layers * h * h * ((2.0 * ratio + 2.0) * agg.S + agg.Q / h)
    mlp = 2.0 * layers * h * (3.0 * spec.ffn_active_dim) * agg.S
    vocab = 2.0 * h * spec.vocab_size * agg.S
    return FlopsBreakdown(attention=attention, mlp=mlp, vocab=vocab)


def to_pflops(flops: float) -> float:
    return flops / 1e15


@dataclass(frozen=True)
class ComponentCost:
    """Per-component FLOPs and latency for one run (or a sum of runs)."""

    sampling_flops: float
    extraction_flops: float
    sampling_latency: float
    extraction_latency: float
    dedup_latency: float

    def __add__(self, other: "ComponentCost") -> "ComponentCost":
        return ComponentCost(
            self.sampling_flops + other.sampling_flops,
            self.extraction_flops + other.extraction_flops,
            self.sampling_latency + other.sampling_latency,
            self.extraction_latency + other.extraction_latency,
            self.dedup_latency + other.dedup_latency,
        )


COMPONENT_COST_ZERO = ComponentCost(0.0, 0.0, 0.0, 0.0, 0.0)

_SAMPLING_KINDS = ("full_prefill", "cpt_generation", "deepconf_completion", "leap_segment")


def ledger_from_run(result, spec: ModelSpec, generation_mode: str = "reprefill") -> ComponentCost:
    """Split a run's cost into sampling and extraction components.

    *result* must expose ``requests`` (RequestRecords) and ``timings`` with
    sampling/extraction/admission wall-clock seconds. Dedup & filter latency
    is reported without a FLOPs figure (its compute is uncounted).
    """
    sampling = aggregate_sq(
        (r for r in result.requests if r.kind in _SAMPLING_KINDS), generation_mode
    )
    extraction = aggregate_sq(
        (r for r in result.requests if r.kind == "cpt_extraction"), generation_mode
    )
    return ComponentCost(
        sampling_flops=flops_total(sampling, spec).total,
        extraction_flops=flops_total(extraction, spec).total,
        sampling_latency=result.timings.sampling,
        extraction_latency=result.timings.extraction,
        dedup_latency=result.timings.admission,
    )


# Convenience registry; "toy" is the hand-checkable reference spec, the two
# qwen entries mirror the public model configs (30b-a3b pre-multiplies the
# per-expert FFN width by the 8 activated experts).
BUILTIN_MODEL_SPECS: dict[str, ModelSpec] = {
    "toy": ModelSpec(
        hidden_size=4, num_layers=2, num_heads=2, num_kv_heads=1, vocab_size=10, ffn_active_dim=8
    ),
    "qwen3-4b-thinking-2507": ModelSpec(
        hidden_size=2560,
        num_layers=36,
        num_heads=32,
        num_kv_heads=8,
        vocab_size=151936,
        ffn_active_dim=9728,
    ),
    "qwen3-30b-a3b-thinking-2507": ModelSpec(
        hidden_size=2048,
        num_layers=48,
        num_heads=32,
        num_kv_heads=4,
        vocab_size=151936,
        ffn_active_dim=6144,
    ),
}


def load_registry(path: str | Path | None = None) -> dict[str, ModelSpec]:
    """Builtin specs, optionally extended/overridden from a JSON registry file."""
    registry = dict(BUILTIN_MODEL_SPECS)
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError("model registry must map names to spec fields")
        for name, fields in data.items():
            registry[name] = ModelSpec(**fields)
    return registry


def get_model_spec(name: str, registry: dict[str, ModelSpec] | None = None) -> ModelSpec:
    registry = registry if registry is not None else BUILTIN_MODEL_SPECS
    try:
        return registry[name]
    except KeyError:
        known = ", ".join(sorted(registry))
        raise KeyError(f"unknown model spec {name!r}; known specs: {known}") from None
