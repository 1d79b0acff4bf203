"""Topic-based publish/subscribe fabric over simulated nodes.

Envelopes published without a target node are delivered on the publishing
node only. Cross-node traffic is explicit: a publisher names a ``target_node``
and the envelope arrives there after the configured link latency. Bridge
routes (``open_route``) are the only mechanism that forwards a topic from one
node to another, so nothing crosses a link unless a running bridge asked for it.

Subscription membership is evaluated when an envelope is delivered, not when
it is published.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

from fleetsim.simkernel import Kernel

log = logging.getLogger(__name__)

Handler = Callable[["MessageEnvelope"], None]
DeliveryObserver = Callable[[str, "MessageEnvelope", int], None]


class BusError(ValueError):
    """Rejected bus operation (unknown node, malformed topic or pattern)."""


def validate_topic(path: str) -> str:
    if not isinstance(path, str) or not path.startswith("/") or path == "/":
        raise BusError(f"malformed topic {path!r}")
    segments = path[1:].split("/")
    if any(s == "" for s in segments):
        raise BusError(f"malformed topic {path!r}: empty segment")
    if any(("+" in s or "#" in s) for s in segments):
        raise BusError(f"malformed topic {path!r}: wildcards are not allowed in topics")
    return path


def validate_pattern(pattern: str) -> tuple[str, ...]:
    """Split a subscription pattern into segments, rejecting bad wildcards.

    ``+`` matches exactly one segment and ``#`` any suffix (including an
    empty one). A bare ``#`` matches every topic.
    """
    if not isinstance(pattern, str) or not pattern:
        raise BusError(f"malformed pattern {pattern!r}")
    if pattern == "#":
        return ("#",)
    if not pattern.startswith("/") or pattern == "/":
        raise BusError(f"malformed pattern {pattern!r}")
    segments = tuple(pattern[1:].split("/"))
    for i, seg in enumerate(segments):
        if seg == "":
            raise BusError(f"malformed pattern {pattern!r}: empty segment")
        if seg == "#" and i != len(segments) - 1:
            raise BusError(f"malformed pattern {pattern!r}: '#' must be last")
        if seg not in ("+", "#") and ("+" in seg or "#" in seg):
            raise BusError(f"malformed pattern {pattern!r}: wildcard inside segment")
    return segments


def matches(pattern: str | tuple[str, ...], topic: str) -> bool:
    segments = validate_pattern(pattern) if isinstance(pattern, str) else pattern
    if segments == ("#",):
        return True
    parts = topic[1:].split("/")
    for i, seg in enumerate(segments):
        if seg == "#":
            return True
        if i >= len(parts):
            return False
        if seg != "+" and seg != parts[i]:
            return False
    return len(parts) == len(segments)


@dataclass(frozen=True, slots=True)
class MessageEnvelope:
    topic: str
    publish_time: int
    source_node: str
    schema_tag: str
    payload: bytes
    sequence: int = -1
    target_node: str | None = None


@dataclass(frozen=True)
class LinkSpec:
    endpoint_a: str
    endpoint_b: str
    latency: int
    symmetric: bool = True


@dataclass
class Subscription:
    sub_id: int
    node: str
    pattern: str
    segments: tuple[str, ...]
    handler: Handler
    active: bool = True


@dataclass
class _Route:
    src_node: str
    src_topic: str
    dst_topic: str
    dst_node: str
    owners: set[str] = field(default_factory=set)
    sub_id: int | None = None


class Bus:
    def __init__(self, kernel: Kernel) -> None:
        self.kernel = kernel
        self._nodes: set[str] = set()
        self._links: dict[tuple[str, str], int] = {}
        self._subs: dict[int, Subscription] = {}
        self._by_node: dict[str, list[Subscription]] = {}
        self._match_cache: dict[str, dict[str, list[Subscription]]] = {}
        self._seq: dict[tuple[str, str], int] = {}
        self._next_sub = 0
        self._routes: dict[tuple[str, str, str, str], _Route] = {}
        self._observers: list[DeliveryObserver] = []
        self.published = 0
        self.delivered = 0

    # topology -----------------------------------------------------------

    def add_node(self, node_id: str) -> None:
        self._nodes.add(node_id)
        self._by_node.setdefault(node_id, [])
        self._match_cache.setdefault(node_id, {})

    def has_node(self, node_id: str) -> bool:
        return node_id in self._nodes

    def _require(self, node_id: str) -> None:
        if node_id not in self._nodes:
            raise BusError(f"unknown node {node_id!r}")

    def set_link(self, spec: LinkSpec) -> None:
        self._require(spec.endpoint_a)
        self._require(spec.endpoint_b)
        if spec.latency < 0:
            raise BusError("link latency must be >= 0")
        self._links[(spec.endpoint_a, spec.endpoint_b)] = spec.latency
        if spec.symmetric:
            self._links[(spec.endpoint_b, spec.endpoint_a)] = spec.latency

    def latency(self, src: str, dst: str) -> int:
        if src == dst:
            return 0
        return self._links.get((src, dst), 0)

    # pub/sub ------------------------------------------------------------

    def subscribe(self, node: str, pattern: str, handler: Handler) -> int:
        self._require(node)
        segments = validate_pattern(pattern)
        sub = Subscription(self._next_sub, node, pattern, segments, handler)
        self._next_sub += 1
        self._subs[sub.sub_id] = sub
        self._by_node[node].append(sub)
        self._match_cache[node].clear()
        return sub.sub_id

    def unsubscribe(self, sub_id: int) -> bool:
        sub = self._subs.pop(sub_id, None)
        if sub is None:
            return False
        sub.active = False
        self._by_node[sub.node].remove(sub)
        self._match_cache[sub.node].clear()
        return True

    def add_observer(self, observer: DeliveryObserver) -> None:
        """Register ``observer(node, envelope, n_handlers)`` called on every delivery."""
        self._observers.append(observer)

    def publish(self, envelope: MessageEnvelope) -> int:
        self._require(envelope.source_node)
        validate_topic(envelope.topic)
        dst = envelope.target_node or envelope.source_node
        self._require(dst)
        key = (envelope.source_node, envelope.topic)
        seq = self._seq.get(key, 0)
        self._seq[key] = seq + 1
        env = replace(envelope, sequence=seq)
        self.published += 1
        at = env.publish_time + self.latency(env.source_node, dst)
        self.kernel.schedule(self._deliver, max(at, self.kernel.now()), dst, env)
        return seq

    def _matching(self, node: str, topic: str) -> list[Subscription]:
        cache = self._match_cache[node]
        hit = cache.get(topic)
        if hit is None:
            hit = [s for s in self._by_node[node] if matches(s.segments, topic)]
            cache[topic] = hit
        return hit

    def _deliver(self, node: str, env: MessageEnvelope) -> None:
        # copy: handlers may (un)subscribe while we iterate
        targets = list(self._matching(node, env.topic))
        for obs in self._observers:
            obs(node, env, len(targets))
        for sub in targets:
            if not sub.active:
                continue
            self.delivered += 1
            try:
                sub.handler(env)
            except Exception:
                log.exception("subscriber %d on %s failed for %s", sub.sub_id, node, env.topic)

    # bridge routes ------------------------------------------------------

    def open_route(self, owner: str, src_node: str, src_topic: str, dst_topic: str, dst_node: str) -> None:
        """Forward ``src_topic`` on ``src_node`` to ``dst_topic`` on ``dst_node``.

        Routes are shared: several owners asking for the same forwarding get a
        single stream, so overlapping bridges never duplicate traffic.
        """
        self._require(src_node)
        self._require(dst_node)
        validate_topic(src_topic)
        validate_topic(dst_topic)
        key = (src_node, src_topic, dst_topic, dst_node)
        route = self._routes.get(key)
        if route is None:
            route = self._routes[key] = _Route(src_node, src_topic, dst_topic, dst_node)
        route.owners.add(owner)
        if route.sub_id is None:
            route.sub_id = self.subscribe(src_node, src_topic, lambda env, r=route: self._forward(r, env))

    def close_route(self, owner: str, src_node: str, src_topic: str, dst_topic: str, dst_node: str) -> bool:
        route = self._routes.get((src_node, src_topic, dst_topic, dst_node))
        if route is None or owner not in route.owners:
            return False
        route.owners.discard(owner)
        if not route.owners and route.sub_id is not None:
            self.unsubscribe(route.sub_id)
            route.sub_id = None
        return True

    def route_active(self, src_node: str, src_topic: str, dst_topic: str, dst_node: str) -> bool:
        route = self._routes.get((src_node, src_topic, dst_topic, dst_node))
        return bool(route and route.owners)

    def _forward(self, route: _Route, env: MessageEnvelope) -> None:
        self.publish(
            MessageEnvelope(
                topic=route.dst_topic,
                publish_time=self.kernel.now(),
                source_node=route.src_node,
                schema_tag=env.schema_tag,
                payload=env.payload,
                target_node=route.dst_node,
            )
        )
