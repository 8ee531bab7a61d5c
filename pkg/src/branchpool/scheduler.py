"""Adaptive broadcast scheduling.

Per-step new-note counts are averaged over fixed windows; the first completed
window becomes the reference gain, and later windows' ratios against it drive
the one-way probe -> broadcast -> free-run state machine. All comparisons are
strict, and at most one transition can fire per window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import ContractViolation, Mode


@dataclass(frozen=True)
class ModeTransition:
    step: int
    old_mode: Mode
    new_mode: Mode
    ratio: float


@dataclass(frozen=True)
class WindowRecord:
    """One completed window: its mean gain and ratio (None for the first)."""

    index: int
    step: int
    gain: float
    ratio: float | None


@dataclass
class BroadcastScheduler:
    """Single-owner schedule state, driven at step boundaries."""

    window_size: int
    start_threshold: float
    stop_threshold: float
    epsilon: float
    mode: Mode = Mode.PROBE
    counts: list[int] = field(default_factory=list)
    reference_gain: float | None = None
    window_log: list[WindowRecord] = field(default_factory=list)
    transition_log: list[ModeTransition] = field(default_factory=list)
    _windows_seen: int = 0

    def record_step(self, n: int) -> None:
        """Append one step's new-note count."""
        if self.mode is Mode.FREERUN:
            raise ContractViolation("cannot record steps after entering free-run")
        if n < 0:
            raise ValueError("new-note count must be nonnegative")
        self.counts.append(n)

    def window_update(self) -> ModeTransition | None:
        """Evaluate the schedule at a possible window boundary.

        No-op unless the record length is a fresh positive multiple of the
        window size. The first window only pins the reference gain; later
        windows may fire at most one forward transition.
        """
        steps = len(self.counts)
        if steps == 0 or steps % self.window_size != 0:
            return None
        index = steps // self.window_size
        if index <= self._windows_seen:
            return None
        self._windows_seen = index
        gain = sum(self.counts[-self.window_size:]) / self.window_size
        if self.reference_gain is None:
            self.reference_gain = gain
            self.window_log.append(WindowRecord(index, steps, gain, None))
            return None
        ratio = gain / (self.reference_gain + self.epsilon)
        self.window_log.append(WindowRecord(index, steps, gain, ratio))
        transition: ModeTransition | None = None
        if self.mode is Mode.PROBE and ratio < self.start_threshold:
            transition = ModeTransition(steps, Mode.PROBE, Mode.BROADCAST, ratio)
            self.mode = Mode.BROADCAST
        elif self.mode is Mode.BROADCAST and ratio < self.stop_threshold:
            transition = ModeTransition(steps, Mode.BROADCAST, Mode.FREERUN, ratio)
            self.mode = Mode.FREERUN
        if transition is not None:
            self.transition_log.append(transition)
        return transition

    def broadcasting_active(self) -> bool:
        return self.mode is Mode.BROADCAST


def scheduler_from_config(config) -> BroadcastScheduler:
    return BroadcastScheduler(
        window_size=config.window_size,
        start_threshold=config.start_threshold,
        stop_threshold=config.stop_threshold,
        epsilon=config.epsilon,
    )
