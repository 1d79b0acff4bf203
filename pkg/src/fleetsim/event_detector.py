"""Event detector: time-bounded buffer, periodic analysis, action plugins.

The detector subscribes a set of topic patterns on its node and buffers every
envelope it receives for ``buffer_duration``. Every ``analysis_period`` it runs
each analyzer over a read-only view of the buffer and dispatches resulting
events to plugins. Payload bytes are never decoded here; analyzers decode
what they understand.
"""

from __future__ import annotations

import bisect
import heapq
import itertools
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Protocol, Sequence

from fleetsim.bus import Bus, MessageEnvelope, matches, validate_pattern
from fleetsim.recorder import RecordStore, StoreError, StoreIOError
from fleetsim.simkernel import MILLISECOND, SECOND, Kernel, Periodic, next_grid_time

log = logging.getLogger(__name__)

TASK_TOPIC = "/operator/tasks"
DECISION_TOPIC = "/operator/decisions"
INTENTS = ("deploy", "reconfigure", "shutdown")


class DetectorError(ValueError):
    pass


def pair_key(i: int, j: int) -> str:
    return f"pair:{min(i, j)}-{max(i, j)}"


@dataclass(frozen=True)
class Event:
    event_type: str
    detected_at: int
    correlation_key: str
    attributes: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class CapabilityRequest:
    tag: str
    count: int = 1
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class TaskDescription:
    request_id: str
    correlation_key: str
    intent: str
    required_capabilities: tuple[CapabilityRequest, ...] = ()
    data_sources: tuple[str, ...] = ()
    placement_hint: str | None = None
    issued_at: int = 0
    # operator that issued the request; managers only act on their own operator's tasks
    issuer: str | None = None

    def to_dict(self) -> dict:
        return {
            "request_id": self.request_id,
            "correlation_key": self.correlation_key,
            "intent": self.intent,
            "required_capabilities": [
                {"tag": c.tag, "count": c.count, "params": c.params} for c in self.required_capabilities
            ],
            "data_sources": list(self.data_sources),
            "placement_hint": self.placement_hint,
            "issued_at": self.issued_at,
            "issuer": self.issuer,
        }

    def encode(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()

    @classmethod
    def from_dict(cls, obj: dict) -> TaskDescription:
        caps = tuple(
            CapabilityRequest(c["tag"], int(c.get("count", 1)), dict(c.get("params", {})))
            for c in obj.get("required_capabilities", [])
        )
        return cls(
            request_id=str(obj["request_id"]),
            correlation_key=str(obj["correlation_key"]),
            intent=str(obj["intent"]),
            required_capabilities=caps,
            data_sources=tuple(obj.get("data_sources", ())),
            placement_hint=obj.get("placement_hint"),
            issued_at=int(obj.get("issued_at", 0)),
            issuer=obj.get("issuer"),
        )

    @classmethod
    def decode(cls, payload: bytes) -> TaskDescription:
        return cls.from_dict(json.loads(payload))

    def problems(self) -> list[str]:
        out = []
        if self.intent not in INTENTS:
            out.append(f"unknown intent {self.intent!r}")
        if not self.correlation_key:
            out.append("empty correlation_key")
        if self.intent == "deploy" and not self.required_capabilities:
            out.append("deploy intent lists no capabilities")
        for c in self.required_capabilities:
            if c.count < 1:
                out.append(f"capability {c.tag!r} has count {c.count}")
        return out


# -- buffer ---------------------------------------------------------------


def _key(env: MessageEnvelope) -> tuple[int, int]:
    return (env.publish_time, env.sequence)


class RingBuffer:
    """Per-topic time window; entries older than ``duration`` are evicted lazily."""

    def __init__(self, duration: int) -> None:
        if duration <= 0:
            raise DetectorError("buffer_duration must be positive")
        self.duration = duration
        self._topics: dict[str, deque[MessageEnvelope]] = {}

    def _evict(self, dq: deque[MessageEnvelope], now: int) -> None:
        cutoff = now - self.duration
        while dq and dq[0].publish_time <= cutoff:
            dq.popleft()

    def append(self, env: MessageEnvelope, now: int) -> None:
        dq = self._topics.get(env.topic)
        if dq is None:
            dq = self._topics[env.topic] = deque()
        if not dq or _key(dq[-1]) <= _key(env):
            dq.append(env)
        else:
            # late arrival from a slower route; rare, keep the topic sorted
            items = list(dq)
            bisect.insort(items, env, key=_key)
            dq.clear()
            dq.extend(items)
        self._evict(dq, now)

    def evict(self, now: int) -> None:
        for dq in self._topics.values():
            self._evict(dq, now)

    def horizon(self, now: int) -> int:
        return max(0, now - self.duration)

    def __len__(self) -> int:
        return sum(len(dq) for dq in self._topics.values())

    def topics(self) -> list[str]:
        return sorted(t for t, dq in self._topics.items() if dq)

    def count(self, topic: str) -> int:
        dq = self._topics.get(topic)
        return len(dq) if dq else 0

    def latest(self, topic: str) -> MessageEnvelope | None:
        dq = self._topics.get(topic)
        return dq[-1] if dq else None

    def entries(self, topic: str) -> Sequence[MessageEnvelope]:
        return tuple(self._topics.get(topic, ()))

    def query(self, pattern: str, start: int, end: int, now: int) -> list[MessageEnvelope]:
        if start > end:
            raise DetectorError(f"query interval from={start} > to={end}")
        self.evict(now)
        segments = validate_pattern(pattern)
        streams = []
        for topic in sorted(self._topics):
            if not matches(segments, topic):
                continue
            dq = self._topics[topic]
            streams.append([e for e in dq if start <= e.publish_time <= end])
        return list(heapq.merge(*streams, key=_key))


class BufferView:
    """Read-only facade handed to analyzers for the duration of one cycle."""

    def __init__(self, buffer: RingBuffer, now: int) -> None:
        self._buffer = buffer
        self.now = now

    def topics(self) -> list[str]:
        return self._buffer.topics()

    def latest(self, topic: str) -> MessageEnvelope | None:
        return self._buffer.latest(topic)

    def entries(self, topic: str) -> Sequence[MessageEnvelope]:
        return self._buffer.entries(topic)

    def window(self, pattern: str, start: int | None = None, end: int | None = None) -> list[MessageEnvelope]:
        start = self._buffer.horizon(self.now) if start is None else start
        end = self.now if end is None else end
        return self._buffer.query(pattern, start, end, self.now)


# -- analyzers and plugins ------------------------------------------------


class Analyzer(Protocol):
    name: str

    def initial_state(self) -> Any: ...

    def analyze(self, now: int, view: BufferView, state: Any) -> list[Event]: ...


class Plugin(Protocol):
    def on_event(self, event: Event) -> None: ...


@dataclass
class PluginBinding:
    plugin: Any
    event_types: frozenset[str] | None = None  # None: every event type

    def accepts(self, event: Event) -> bool:
        return self.event_types is None or event.event_type in self.event_types


@dataclass
class DetectorConfig:
    subscriptions: list[str]
    buffer_duration: int = 15 * SECOND
    analysis_period: int = 100 * MILLISECOND
    analyzers: list[Any] = field(default_factory=list)
    plugins: list[PluginBinding] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.buffer_duration <= 0:
            raise DetectorError("buffer_duration must be positive")
        if self.analysis_period <= 0:
            raise DetectorError("analysis_period must be positive")
        if not self.subscriptions:
            raise DetectorError("detector needs at least one subscription")
        for p in self.subscriptions:
            validate_pattern(p)


class EventDetector:
    def __init__(self, kernel: Kernel, bus: Bus, node: str, config: DetectorConfig, name: str = "detector") -> None:
        self.kernel = kernel
        self.bus = bus
        self.node = node
        self.config = config
        self.name = name
        self.buffer = RingBuffer(config.buffer_duration)
        self._states = [a.initial_state() for a in config.analyzers]
        self._sub_ids: list[int] = []
        self._timer: Periodic | None = None
        self.analyzer_failures = 0
        self.plugin_failures = 0
        self.cycles = 0
        self.cycle_wall_ms: list[float] = []
        self.events: list[Event] = []

    @property
    def running(self) -> bool:
        return self._timer is not None

    def start(self) -> None:
        if self._timer is not None:
            return
        for pattern in self.config.subscriptions:
            self._sub_ids.append(self.bus.subscribe(self.node, pattern, self.ingest))
        period = self.config.analysis_period
        first = next_grid_time(self.kernel.now(), period)
        self._timer = self.kernel.every(period, self._tick, start=first)

    def stop(self) -> None:
        for sid in self._sub_ids:
            self.bus.unsubscribe(sid)
        self._sub_ids.clear()
        if self._timer is not None:
            self._timer.stop()
            self._timer = None
        for binding in self.config.plugins:
            close = getattr(binding.plugin, "close", None)
            if close is not None:
                close()

    def ingest(self, env: MessageEnvelope) -> None:
        now = self.kernel.now()
        self.buffer.append(env, now)
        for binding in self.config.plugins:
            on_env = getattr(binding.plugin, "on_envelope", None)
            if on_env is not None:
                on_env(env)

    def query_window(self, pattern: str, start: int, end: int) -> list[MessageEnvelope]:
        return self.buffer.query(pattern, start, end, self.kernel.now())

    def analysis_cycle(self) -> list[Event]:
        now = self.kernel.now()
        started = time.perf_counter()
        self.buffer.evict(now)
        view = BufferView(self.buffer, now)
        out: list[Event] = []
        for idx, analyzer in enumerate(self.config.analyzers):
            try:
                out.extend(analyzer.analyze(now, view, self._states[idx]))
            except Exception:
                self.analyzer_failures += 1
                log.exception("analyzer %s failed at t=%d", getattr(analyzer, "name", idx), now)
        self.cycle_wall_ms.append((time.perf_counter() - started) * 1e3)
        self.cycles += 1
        return out

    def dispatch(self, event: Event) -> None:
        for binding in self.config.plugins:
            if not binding.accepts(event):
                continue
            on_event = getattr(binding.plugin, "on_event", None)
            if on_event is None:
                continue
            try:
                on_event(event)
            except Exception:
                self.plugin_failures += 1
                log.exception("plugin %r failed on %s", binding.plugin, event.event_type)

    def _tick(self) -> None:
        for event in self.analysis_cycle():
            self.events.append(event)
            self.dispatch(event)
        for binding in self.config.plugins:
            flush = getattr(binding.plugin, "flush", None)
            if flush is not None:
                flush()


# -- plugins ---------------------------------------------------------------


def _fill(template: Any, attrs: dict[str, Any]) -> Any:
    """Substitute event attributes into a task template.

    A string that is exactly ``"{name}"`` is replaced by the attribute value
    itself (keeping lists and numbers intact); other strings are formatted.
    """
    if isinstance(template, str):
        if template.startswith("{") and template.endswith("}") and template[1:-1] in attrs:
            return attrs[template[1:-1]]
        return template.format(**attrs) if "{" in template else template
    if isinstance(template, list):
        return [_fill(t, attrs) for t in template]
    if isinstance(template, dict):
        return {k: _fill(v, attrs) for k, v in template.items()}
    return template


@dataclass
class TaskRule:
    """Maps one event type to the task description the operator emits."""

    event_type: str
    intent: str
    capabilities: list[dict] = field(default_factory=list)
    data_sources: list[str] = field(default_factory=list)
    placement_hint: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> TaskRule:
        return cls(
            event_type=obj["event_type"],
            intent=obj["intent"],
            capabilities=list(obj.get("capabilities", [])),
            data_sources=list(obj.get("data_sources", [])),
            placement_hint=obj.get("placement_hint"),
        )


class OperatorPlugin:
    """Turns events into task descriptions published on ``/operator/tasks``."""

    def __init__(
        self,
        kernel: Kernel,
        bus: Bus,
        node: str,
        issuer: str,
        rules: Iterable[TaskRule],
        constants: dict[str, Any] | None = None,
    ) -> None:
        self.kernel = kernel
        self.bus = bus
        self.node = node
        self.issuer = issuer
        self.rules = {r.event_type: r for r in rules}
        # extra template variables, e.g. the operator's own thresholds
        self.constants = dict(constants or {})
        self._counter = itertools.count()
        self.issued: list[TaskDescription] = []

    def build_task(self, event: Event) -> TaskDescription | None:
        rule = self.rules.get(event.event_type)
        if rule is None:
            return None
        attrs = {**self.constants, **event.attributes, "correlation_key": event.correlation_key}
        caps = tuple(
            CapabilityRequest(c["tag"], int(_fill(c.get("count", 1), attrs)), _fill(c.get("params", {}), attrs))
            for c in rule.capabilities
        )
        return TaskDescription(
            request_id=f"{self.issuer}#{next(self._counter)}",
            correlation_key=event.correlation_key,
            intent=rule.intent,
            required_capabilities=caps,
            data_sources=tuple(_fill(rule.data_sources, attrs)),
            placement_hint=rule.placement_hint,
            issued_at=self.kernel.now(),
            issuer=self.issuer,
        )

    def on_event(self, event: Event) -> None:
        td = self.build_task(event)
        if td is None:
            return
        self.issued.append(td)
        self.bus.publish(
            MessageEnvelope(
                topic=TASK_TOPIC,
                publish_time=self.kernel.now(),
                source_node=self.node,
                schema_tag="task",
                payload=td.encode(),
            )
        )


class RecordingPlugin:
    """Pass-through recorder: every matching envelope becomes a store entry.

    Entries are queued on arrival and written at each analysis-period flush;
    a failed write is retried once and then counted as dropped.
    """

    def __init__(self, kernel: Kernel, store: RecordStore, patterns: Sequence[str]) -> None:
        self.kernel = kernel
        self.store = store
        self.patterns = [validate_pattern(p) for p in patterns]
        self._pending: list[tuple[MessageEnvelope, int]] = []

    def on_envelope(self, env: MessageEnvelope) -> None:
        if any(matches(p, env.topic) for p in self.patterns):
            self._pending.append((env, self.kernel.now()))

    def flush(self) -> None:
        if not self._pending:
            return
        pending, self._pending = self._pending, []
        for env, ingest_time in pending:
            for attempt in (0, 1):
                try:
                    self.store.append(env.topic, env.publish_time, ingest_time, env.schema_tag, env.payload)
                    break
                except StoreIOError:
                    if attempt == 1:
                        self.store.record_drop()
                except StoreError:
                    self.store.record_drop()
                    break
        self.store.flush()

    def close(self) -> None:
        self.flush()


def summarize_cycles(samples_ms: Sequence[float]) -> dict[str, float]:
    if not samples_ms:
        return {"cycles": 0, "mean_ms": 0.0, "max_ms": 0.0}
    return {
        "cycles": len(samples_ms),
        "mean_ms": sum(samples_ms) / len(samples_ms),
        "max_ms": max(samples_ms),
    }
