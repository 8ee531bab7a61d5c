"""Config validation, serialization round trips, RNG streams, branch state."""

from __future__ import annotations

import dataclasses

import pytest

from branchpool.core import (
    BranchState,
    ConfigError,
    ContractViolation,
    Mode,
    RunConfig,
    SamplingParams,
    apply_overrides,
    derive_rng,
    dump_config,
    parse_config,
    parse_override_pairs,
    validate_config,
)


def test_defaults_match_documented_values():
    config = validate_config(RunConfig())
    assert config.chunk_tokens == 2048
    assert config.broadcast_size == 512
    assert config.dedup_threshold == 0.75
    assert config.window_size == 3
    assert config.start_threshold == 0.4
    assert config.stop_threshold == 0.1
    assert config.max_tokens == 38000
    assert config.epsilon == 1e-9
    assert config.sampling == SamplingParams(temperature=0.6, top_p=0.95, top_k=20)


def test_paper_style_config_accepted():
    config = validate_config(RunConfig(branch_count=64, chunk_tokens=2048))
    assert config.branch_count == 64


def test_stop_above_start_rejected():
    with pytest.raises(ConfigError, match="stop threshold must be below start threshold"):
        validate_config(RunConfig(start_threshold=0.2, stop_threshold=0.3))


def test_chunk_above_max_rejected():
    with pytest.raises(ConfigError, match="chunk exceeds max length"):
        validate_config(RunConfig(branch_count=8, chunk_tokens=16, max_tokens=8))


def test_zero_branches_rejected():
    with pytest.raises(ConfigError, match="branch count"):
        validate_config(RunConfig(branch_count=0))


def test_config_round_trip_is_byte_identical():
    config = validate_config(RunConfig(branch_count=4, seed=11))
    text = dump_config(config)
    assert dump_config(parse_config(text)) == text
    assert parse_config(text) == config


def test_unknown_config_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config keys"):
        parse_config('{"branch_count": 4, "mystery": 1}')
    with pytest.raises(ConfigError, match="unknown sampling keys"):
        parse_config('{"sampling": {"temp": 0.5}}')


def test_overrides_accept_aliases_and_dotted_sampling():
    config = validate_config(RunConfig())
    updated = apply_overrides(config, {"K": 8, "tau_start": 0.5, "sampling.temperature": 0.2})
    assert updated.branch_count == 8
    assert updated.start_threshold == 0.5
    assert updated.sampling.temperature == 0.2
    with pytest.raises(ConfigError, match="unknown config override"):
        apply_overrides(config, {"bogus": 1})


def test_override_pairs_parse_json_values():
    parsed = parse_override_pairs(["K=8", "start_threshold=0.5", "note=plain"])
    assert parsed == {"K": 8, "start_threshold": 0.5, "note": "plain"}
    with pytest.raises(ConfigError):
        parse_override_pairs(["no-equals"])


def test_derive_rng_is_deterministic_and_separated():
    a1 = derive_rng(7, "broadcast").integers(0, 1_000_000, size=8)
    a2 = derive_rng(7, "broadcast").integers(0, 1_000_000, size=8)
    b = derive_rng(7, "montecarlo").integers(0, 1_000_000, size=8)
    c = derive_rng(8, "broadcast").integers(0, 1_000_000, size=8)
    assert list(a1) == list(a2)
    assert list(a1) != list(b)
    assert list(a1) != list(c)


def test_mode_ordering():
    assert Mode.PROBE < Mode.BROADCAST < Mode.FREERUN
    assert Mode.from_label("freerun") is Mode.FREERUN
    assert Mode.BROADCAST.label == "broadcast"


def test_branch_state_token_accounting():
    branch = BranchState(branch_id=0)
    branch.append_segment("alpha ", 3)
    branch.append_segment("beta", 2)
    assert branch.generated_tokens == sum(s.token_count for s in branch.history) == 5
    assert branch.history_text() == "alpha beta"


def test_branch_state_append_only_after_finish():
    branch = BranchState(branch_id=1)
    branch.append_segment("x", 1)
    branch.mark_finished("eos")
    with pytest.raises(ContractViolation):
        branch.append_segment("y", 1)
    with pytest.raises(ContractViolation):
        branch.mark_finished("length_cap")


def test_sampling_params_validation():
    with pytest.raises(ConfigError):
        validate_config(RunConfig(sampling=SamplingParams(temperature=-0.1)))
    with pytest.raises(ConfigError):
        validate_config(RunConfig(sampling=SamplingParams(top_p=0.0)))


def test_config_is_frozen():
    config = RunConfig()
    with pytest.raises(dataclasses.FrozenInstanceError):
        config.branch_count = 4  # type: ignore[misc]
