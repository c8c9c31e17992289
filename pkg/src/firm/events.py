"""Deterministic discrete-event loop with a structured event log."""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import InvariantViolation

ARRIVAL = "request-arrival"
ADMISSION = "admission"
COMPLETION = "completion"
TRIGGER = "trigger"
DEMOTION = "demotion"
PROMOTION = "promotion"
TICK = "tick"


@dataclass(order=True)
class SimEvent:
    time: float
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)
    handler: Callable[[SimEvent], Any] | None = field(compare=False, default=None, repr=False)


class EventLoop:
    """Min-heap of events ordered by (time, insertion sequence).

    ``log`` holds plain dict records meant for assertions and export; the
    loop itself never reads it back.
    """

    def __init__(self):
        self.now = 0.0
        self.log: list[dict] = []
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self.processed = 0

    def __len__(self):
        return len(self._queue)

    def schedule(self, time: float, kind: str, handler=None, **payload) -> SimEvent:
        if time < self.now:
            raise InvariantViolation(f"cannot schedule {kind} at {time} before now={self.now}")
        event = SimEvent(time, next(self._seq), kind, payload, handler)
        heapq.heappush(self._queue, event)
        return event

    def record(self, kind: str, **fields) -> dict:
        entry = {"time": self.now, "kind": kind, **fields}
        self.log.append(entry)
        return entry

    def step(self) -> SimEvent | None:
        if not self._queue:
            return None
        event = heapq.heappop(self._queue)
        if event.time < self.now:
            raise InvariantViolation(f"event {event.kind} at {event.time} processed after {self.now}")
        self.now = event.time
        self.processed += 1
        if event.handler is not None:
            event.handler(event)
        return event

    def run(self, until: float | None = None) -> None:
        while self._queue:
            if until is not None and self._queue[0].time > until:
                self.now = until
                return
            self.step()

    def peek_time(self) -> float | None:
        return self._queue[0].time if self._queue else None

    def log_lines(self) -> list[str]:
        return [json.dumps(entry, sort_keys=True, default=str) for entry in self.log]

    def dumps(self) -> str:
        return "\n".join(self.log_lines()) + ("\n" if self.log else "")
