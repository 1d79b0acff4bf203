"""Deterministic virtual-time discrete-event kernel.

Virtual time is an integer count of nanoseconds since scenario start. Events
with equal fire times run in the order they were scheduled. Simulated
latencies (link delay, pod startup) advance virtual time; compute latencies
are measured separately with ``time.perf_counter`` by the modules that care.
"""

from __future__ import annotations

import heapq
import random
import time
from dataclasses import dataclass
from typing import Any, Callable

NANOSECOND = 1
MICROSECOND = 1_000
MILLISECOND = 1_000_000
SECOND = 1_000_000_000


def seconds(value: float) -> int:
    """Convert seconds to integer nanosecond ticks (rounded to nearest)."""
    return int(round(value * SECOND))


def millis(value: float) -> int:
    return int(round(value * MILLISECOND))


def to_seconds(ticks: int) -> float:
    return ticks / SECOND


class SchedulingError(ValueError):
    """Raised when an event would fire before the current virtual time."""


@dataclass(eq=False, slots=True)
class EventHandle:
    fire_at: int
    sequence: int
    action: Callable[..., Any]
    args: tuple
    cancelled: bool = False
    fired: bool = False

    @property
    def pending(self) -> bool:
        return not (self.cancelled or self.fired)


@dataclass(frozen=True)
class KernelStats:
    events_fired: int
    final_time: int
    wall_clock_elapsed: float


class Kernel:
    """Single-threaded event calendar ordered by ``(fire_at, sequence)``."""

    def __init__(self, seed: int = 0) -> None:
        self._now = 0
        self._sequence = 0
        self._calendar: list[tuple[int, int, EventHandle]] = []
        self._fired = 0
        self._wall = 0.0
        self.seed = seed
        self.rng = random.Random(seed)

    def now(self) -> int:
        return self._now

    @property
    def events_fired(self) -> int:
        return self._fired

    def schedule(self, action: Callable[..., Any], at: int, *args: Any) -> EventHandle:
        if at < self._now:
            raise SchedulingError(f"cannot schedule at {at} ns, now is {self._now} ns")
        handle = EventHandle(int(at), self._sequence, action, args)
        self._sequence += 1
        heapq.heappush(self._calendar, (handle.fire_at, handle.sequence, handle))
        return handle

    def schedule_in(self, action: Callable[..., Any], delay: int, *args: Any) -> EventHandle:
        return self.schedule(action, self._now + delay, *args)

    def cancel(self, handle: EventHandle) -> bool:
        if not handle.pending:
            return False
        # lazy removal: the heap entry is skipped when popped
        handle.cancelled = True
        return True

    def every(
        self,
        period: int,
        action: Callable[[], Any],
        start: int | None = None,
    ) -> Periodic:
        """Run ``action`` at ``start, start + period, ...`` until stopped."""
        return Periodic(self, period, action, self._now if start is None else start)

    def pending(self) -> int:
        return sum(1 for _, _, h in self._calendar if h.pending)

    def run_until(self, t_end: int) -> KernelStats:
        if t_end < self._now:
            raise SchedulingError(f"run_until({t_end}) is before now ({self._now})")
        started = time.perf_counter()
        fired = 0
        calendar = self._calendar
        pop = heapq.heappop
        while calendar and calendar[0][0] <= t_end:
            fire_at, _, handle = pop(calendar)
            if handle.cancelled:
                continue
            self._now = fire_at
            handle.fired = True
            fired += 1
            handle.action(*handle.args)
        self._now = t_end
        self._fired += fired
        self._wall += time.perf_counter() - started
        return KernelStats(self._fired, self._now, self._wall)


class Periodic:
    """Repeating timer driven by a kernel; stop() cancels the next firing."""

    def __init__(self, kernel: Kernel, period: int, action: Callable[[], Any], start: int) -> None:
        if period <= 0:
            raise ValueError("period must be positive")
        self.kernel = kernel
        self.period = period
        self.action = action
        self.active = True
        self._handle = kernel.schedule(self._fire, start)

    def _fire(self) -> None:
        if not self.active:
            return
        self._handle = self.kernel.schedule(self._fire, self.kernel.now() + self.period)
        self.action()

    def stop(self) -> None:
        self.active = False
        self.kernel.cancel(self._handle)


def next_grid_time(now: int, period: int) -> int:
    """Smallest multiple of ``period`` that is >= ``now``."""
    return -(-now // period) * period
