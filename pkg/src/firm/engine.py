"""Simulated service engines: in-flight accounting, congestion latency, health reports."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import InvariantViolation, ValidationError
from .registry import DeploymentRef

SIMPLE = "simple"
MAPREDUCE = "mapreduce"
OK = "ok"
FAILED = "failed"


@dataclass(frozen=True)
class EngineParams:
    capacity: int = 4
    base_service_time: float = 10.0
    engine_kind: str = SIMPLE
    job_size_factor: float = 1.0
    failure_probability: float = 0.0
    host: str | None = None  # pin placement; None means placement by address

    def __post_init__(self):
        if self.capacity < 1:
            raise ValidationError("capacity must be a positive integer")
        if self.base_service_time <= 0:
            raise ValidationError("base_service_time must be positive")
        if self.engine_kind not in (SIMPLE, MAPREDUCE):
            raise ValidationError(f"engine_kind must be simple or mapreduce, not {self.engine_kind!r}")
        if self.job_size_factor <= 0:
            raise ValidationError("job_size_factor must be positive")
        if not 0.0 <= self.failure_probability <= 1.0:
            raise ValidationError("failure_probability must lie in [0, 1]")


@dataclass(frozen=True)
class EngineReport:
    ref: DeploymentRef
    mean_service_time: float
    in_flight: int
    over_threshold: bool

    @property
    def alias(self) -> str:
        return self.ref.alias


@dataclass
class EngineState:
    ref: DeploymentRef
    host: str
    params: EngineParams = field(default_factory=EngineParams)
    in_flight: int = 0
    completed: int = 0
    failed: int = 0
    admissions: int = 0
    # (completion time, service duration) of recent finished requests
    recent: deque = field(default_factory=deque, repr=False)

    @property
    def capacity(self) -> int:
        return self.params.capacity

    @property
    def unloaded_time(self) -> float:
        base = self.params.base_service_time
        if self.params.engine_kind == MAPREDUCE:
            base *= self.params.job_size_factor
        return base

    def service_time(self, in_flight: int) -> float:
        """Service time for a request admitted when ``in_flight`` requests are running (itself included)."""
        base = self.unloaded_time
        overload = max(0, in_flight - self.capacity)
        return base * (1 + overload / self.capacity)

    def check(self):
        if self.in_flight < 0 or self.admissions != self.in_flight + self.completed + self.failed:
            raise InvariantViolation(
                f"engine {self.ref}: admissions={self.admissions} in_flight={self.in_flight} "
                f"completed={self.completed} failed={self.failed}"
            )


def admit(state: EngineState, now: float) -> tuple[EngineState, float]:
    """Accept one request; returns the state and its predicted completion time."""
    state.in_flight += 1
    state.admissions += 1
    return state, now + state.service_time(state.in_flight)


def complete(state: EngineState, outcome: str, now: float | None = None, duration: float | None = None) -> EngineState:
    if state.in_flight < 1:
        raise InvariantViolation(f"engine {state.ref}: completion with nothing in flight")
    if outcome not in (OK, FAILED):
        raise ValidationError(f"outcome must be ok or failed, not {outcome!r}")
    state.in_flight -= 1
    if outcome == OK:
        state.completed += 1
    else:
        state.failed += 1
    if now is not None and duration is not None:
        state.recent.append((now, duration))
    return state


def health_report(state: EngineState, window: float, threshold: float, now: float = 0.0) -> EngineReport:
    """Mean service time over completions in ``(now - window, now]``.

    With no completions in the window the mean falls back to the unloaded
    service time and only the in-flight count can flag the engine.
    """
    while state.recent and state.recent[0][0] <= now - window:
        state.recent.popleft()
    durations = [d for t, d in state.recent if t <= now]
    if durations:
        mean = sum(durations) / len(durations)
        slow = mean > threshold
    else:
        mean = state.unloaded_time
        slow = False
    return EngineReport(state.ref, mean, state.in_flight, slow or state.in_flight > state.capacity)
