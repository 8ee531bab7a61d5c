"""Domain types, run configuration, and deterministic RNG streams.

Everything downstream (backend, pool, scheduler, orchestrator) builds on the
types defined here. Configs are immutable once validated; branch state is a
single-writer mutable record with append-only history.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np


class ConfigError(ValueError):
    """Raised when a run configuration violates an invariant."""


class ContractViolation(RuntimeError):
    """Raised when a caller breaks a documented precondition."""


class Mode(IntEnum):
    """Broadcast schedule phase. Transitions only ever move forward."""

    PROBE = 0
    BROADCAST = 1
    FREERUN = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Mode":
        try:
            return cls[label.upper()]
        except KeyError:
            raise ConfigError(f"unknown mode label: {label!r}") from None


@dataclass(frozen=True)
class SamplingParams:
    """Decoding hyperparameters forwarded verbatim to the backend.

    ``top_k=0`` means unlimited (the field is omitted from wire requests).
    """

    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int = 20

    def validate(self) -> None:
        if self.temperature < 0:
            raise ConfigError("temperature must be nonnegative")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.top_k < 0:
            raise ConfigError("top_k must be a positive integer or 0 for unlimited")


@dataclass(frozen=True)
class RunConfig:
    """All knobs of one search run.

    Field names match the config file keys one-to-one. Defaults are the
    documented production settings; ``validate_config`` must be called before
    a config is used.
    """

    branch_count: int = 8
    chunk_tokens: int = 2048
    max_tokens: int = 38000
    broadcast_size: int = 512
    dedup_threshold: float = 0.75
    window_size: int = 3
    start_threshold: float = 0.4
    stop_threshold: float = 0.1
    epsilon: float = 1e-9
    sampling: SamplingParams = field(default_factory=SamplingParams)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "branch_count": self.branch_count,
            "chunk_tokens": self.chunk_tokens,
            "max_tokens": self.max_tokens,
            "broadcast_size": self.broadcast_size,
            "dedup_threshold": self.dedup_threshold,
            "window_size": self.window_size,
            "start_threshold": self.start_threshold,
            "stop_threshold": self.stop_threshold,
            "epsilon": self.epsilon,
            "sampling": {
                "temperature": self.sampling.temperature,
                "top_p": self.sampling.top_p,
                "top_k": self.sampling.top_k,
            },
            "seed": self.seed,
        }


def validate_config(raw: RunConfig) -> RunConfig:
    """Check every invariant of *raw* and return it unchanged.

    Raises ConfigError with a message naming the violated constraint.
    """
    if raw.branch_count <= 0:
        raise ConfigError("branch count must be positive")
    if raw.chunk_tokens <= 0:
        raise ConfigError("chunk tokens must be positive")
    if raw.max_tokens <= 0:
        raise ConfigError("max tokens must be positive")
    if raw.chunk_tokens > raw.max_tokens:
        raise ConfigError("chunk exceeds max length")
    if raw.broadcast_size < 1:
        raise ConfigError("broadcast size must be at least 1")
    if not 0 <= raw.dedup_threshold <= 1:
        raise ConfigError("dedup threshold must be in [0, 1]")
    if raw.window_size < 1:
        raise ConfigError("window size must be at least 1")
    if not 0 < raw.start_threshold <= 1:
        raise ConfigError("start threshold must be in (0, 1]")
    if not 0 <= raw.stop_threshold < 1:
        raise ConfigError("stop threshold must be in [0, 1)")
    if raw.stop_threshold >= raw.start_threshold:
        raise ConfigError("stop threshold must be below start threshold")
    if raw.epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    if raw.seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    raw.sampling.validate()
    return raw


# Short aliases accepted by parse_overrides in addition to full field names.
FIELD_ALIASES = {
    "K": "branch_count",
    "C": "chunk_tokens",
    "L_max": "max_tokens",
    "M": "broadcast_size",
    "W": "window_size",
    "tau_dup": "dedup_threshold",
    "tau_start": "start_threshold",
    "tau_stop": "stop_threshold",
}

_SAMPLING_KEYS = {"temperature", "top_p", "top_k"}
_CONFIG_KEYS = {
    "branch_count",
    "chunk_tokens",
    "max_tokens",
    "broadcast_size",
    "dedup_threshold",
    "window_size",
    "start_threshold",
    "stop_threshold",
    "epsilon",
    "sampling",
    "seed",
}


def config_from_dict(data: dict) -> RunConfig:
    """Build a validated RunConfig from a parsed config document.

    Missing keys take the documented defaults; unknown keys are an error.
    """
    if not isinstance(data, dict):
        raise ConfigError("config document must be a key-value mapping")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    sampling_data = data.get("sampling", {})
    if not isinstance(sampling_data, dict):
        raise ConfigError("sampling must be a key-value mapping")
    unknown = set(sampling_data) - _SAMPLING_KEYS
    if unknown:
        raise ConfigError(f"unknown sampling keys: {sorted(unknown)}")
    sampling = SamplingParams(**sampling_data)
    fields = {k: v for k, v in data.items() if k != "sampling"}
    try:
        config = RunConfig(sampling=sampling, **fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return validate_config(config)


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(data)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(config: RunConfig) -> str:
    """Serialize a config to its canonical text form (round-trip stable)."""
    return json.dumps(config.to_dict(), indent=2) + "\n"


def apply_overrides(config: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Return a copy of *config* with override values applied and re-validated.

    Keys may be full field names, short aliases (K, C, M, W, ...), or dotted
    sampling fields (``sampling.temperature``).
    """
    updates: dict[str, object] = {}
    sampling_updates: dict[str, object] = {}
    for key, value in overrides.items():
        name = FIELD_ALIASES.get(key, key)
        if name.startswith("sampling."):
            sub = name.split(".", 1)[1]
            if sub not in _SAMPLING_KEYS:
                raise ConfigError(f"unknown sampling override: {key}")
            sampling_updates[sub] = value
        elif name in _CONFIG_KEYS - {"sampling"}:
            updates[name] = value
        else:
            raise ConfigError(f"unknown config override: {key}")
    if sampling_updates:
        updates["sampling"] = replace(config.sampling, **sampling_updates)  # type: ignore[arg-type]
    try:
        merged = replace(config, **updates)  # type: ignore[arg-type]
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return validate_config(merged)


def parse_override_pairs(pairs: list[str]) -> dict[str, object]:
    """Parse ``key=value`` strings; values are JSON literals when possible."""
    overrides: dict[str, object] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


def derive_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Deterministic, label-separated random stream.

    The same (seed, label) pair always yields an identical generator; distinct
    labels or seeds give independent streams. Hashing keeps the mapping stable
    across processes and platforms.
    """
    digest = hashlib.sha256(f"{seed}\x1f{stream_label}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


class Segment(NamedTuple):
    """One generated chunk appended to a branch history."""

    text: str
    token_count: int


FINISH_REASONS = ("eos", "length_cap", "none")


@dataclass
class BranchState:
    """Private state of one reasoning branch.

    History is append-only; ``generated_tokens`` always equals the sum of
    segment token counts. Single-writer: only the orchestrator mutates it.
    """

    branch_id: int
    history: list[Segment] = field(default_factory=list)
    generated_tokens: int = 0
    finished: bool = False
    finish_reason: str = "none"

    def append_segment(self, text: str, token_count: int) -> None:
        if self.finished:
            raise ContractViolation(f"branch {self.branch_id} is finished; history is append-only")
        if token_count < 0:
            raise ValueError("segment token count must be nonnegative")
        self.history.append(Segment(text, token_count))
        self.generated_tokens += token_count

    def mark_finished(self, reason: str) -> None:
        if reason not in ("eos", "length_cap"):
            raise ValueError(f"invalid finish reason: {reason!r}")
        if self.finished:
            raise ContractViolation(f"branch {self.branch_id} already finished")
        self.finished = True
        self.finish_reason = reason

    def history_text(self) -> str:
        """Concatenated private trace (chunks are direct continuations)."""
        return "".join(segment.text for segment in self.history)

    def segments(self) -> Iterator[Segment]:
        return iter(self.history)
