import random
import re

import pytest
from hypothesis import given, settings, strategies as st

from fleetsim.bus import Bus, BusError, LinkSpec, MessageEnvelope, matches, validate_pattern
from fleetsim.simkernel import Kernel, millis, seconds


def regex_oracle(pattern: str, topic: str) -> bool:
    """Independent matcher: translate the pattern to a regular expression."""
    if pattern == "#":
        return True
    parts = []
    for seg in pattern[1:].split("/"):
        if seg == "+":
            parts.append("/[^/]+")
        elif seg == "#":
            parts.append("(/.*)?")
        else:
            parts.append("/" + re.escape(seg))
    return re.fullmatch("".join(parts), topic) is not None


def make_bus(*nodes):
    k = Kernel()
    bus = Bus(k)
    for n in nodes:
        bus.add_node(n)
    return k, bus


def env(topic, t=0, src="a", dst=None, payload=b"x"):
    return MessageEnvelope(topic, t, src, "raw", payload, target_node=dst)


@pytest.mark.parametrize(
    "pattern,topic,expected",
    [
        ("/vehicle/+/pose", "/vehicle/3/pose", True),
        ("/vehicle/+/pose", "/vehicle/3/points", False),
        ("/vehicle/#", "/vehicle/3/points", True),
        ("/vehicle/#", "/vehicle", True),
        ("/vehicle/3/pose", "/vehicle/3/pose", True),
        ("/vehicle/3/pose", "/vehicle/31/pose", False),
        ("#", "/operator/tasks", True),
        ("/+", "/a/b", False),
    ],
)
def test_pattern_examples(pattern, topic, expected):
    assert matches(pattern, topic) is expected


@pytest.mark.parametrize("bad", ["", "/", "vehicle/1", "/a//b", "/a/#/b", "/a+/b", "/a/b#"])
def test_malformed_patterns_rejected(bad):
    with pytest.raises(BusError):
        validate_pattern(bad)


SEGS = ["vehicle", "cloud", "0", "1", "pose", "points"]
topics = st.lists(st.sampled_from(SEGS), min_size=1, max_size=4).map(lambda s: "/" + "/".join(s))


@st.composite
def patterns(draw):
    if draw(st.integers(0, 20)) == 0:
        return "#"
    segs = draw(st.lists(st.sampled_from(SEGS + ["+", "+"]), min_size=1, max_size=4))
    if draw(st.booleans()):
        segs.append("#")
    return "/" + "/".join(segs)


@settings(max_examples=1500, deadline=None)
@given(patterns(), topics)
def test_matcher_agrees_with_regex_oracle(pattern, topic):
    assert matches(pattern, topic) == regex_oracle(pattern, topic)


def test_conservation_against_oracle():
    """Every envelope reaches exactly the subscriptions matching at delivery time."""
    rng = random.Random(5)
    k, bus = make_bus("a")
    pats = sorted({regex_pat for regex_pat in (_rand_pattern(rng) for _ in range(40))})
    got = {p: [] for p in pats}
    for p in pats:
        bus.subscribe("a", p, lambda e, p=p: got[p].append(e.topic))
    sent = [_rand_topic(rng) for _ in range(1000)]
    for i, t in enumerate(sent):
        bus.publish(env(t, t=i))
        k.run_until(i)
    for p in pats:
        assert got[p] == [t for t in sent if regex_oracle(p, t)]


def _rand_topic(rng):
    return "/" + "/".join(rng.choice(SEGS) for _ in range(rng.randint(1, 4)))


def _rand_pattern(rng):
    segs = [rng.choice(SEGS + ["+"]) for _ in range(rng.randint(1, 3))]
    if rng.random() < 0.3:
        segs.append("#")
    return "/" + "/".join(segs)


def test_same_node_delivery_is_immediate():
    k, bus = make_bus("a")
    seen = []
    bus.subscribe("a", "/x", lambda e: seen.append(k.now()))
    bus.publish(env("/x", t=seconds(1)))
    k.run_until(seconds(2))
    assert seen == [seconds(1)]


def test_cross_node_link_latency_and_default_zero():
    k, bus = make_bus("a", "b", "c")
    seen = []
    bus.subscribe("b", "/x", lambda e: seen.append(("b", k.now())))
    bus.subscribe("c", "/x", lambda e: seen.append(("c", k.now())))
    bus.set_link(LinkSpec("a", "b", millis(50)))
    bus.publish(env("/x", dst="b"))
    bus.publish(env("/x", dst="c"))
    k.run_until(seconds(1))
    assert sorted(seen) == [("b", millis(50)), ("c", 0)]


def test_untargeted_publish_stays_local():
    k, bus = make_bus("a", "b")
    seen = []
    bus.subscribe("b", "#", seen.append)
    bus.publish(env("/x"))
    k.run_until(seconds(1))
    assert seen == []


def test_zero_subscribers_still_sequenced():
    k, bus = make_bus("a")
    assert bus.publish(env("/x")) == 0
    assert bus.publish(env("/x")) == 1
    assert bus.publish(env("/y")) == 0
    k.run_until(1)
    assert bus.delivered == 0


def test_in_flight_keeps_old_latency():
    k, bus = make_bus("a", "b")
    seen = []
    bus.subscribe("b", "/x", lambda e: seen.append(k.now()))
    bus.set_link(LinkSpec("a", "b", millis(50)))
    bus.publish(env("/x", dst="b"))
    bus.set_link(LinkSpec("a", "b", millis(10)))
    k.run_until(seconds(1))
    assert seen == [millis(50)]


def test_asymmetric_link():
    _, bus = make_bus("a", "b")
    bus.set_link(LinkSpec("a", "b", millis(30)))
    bus.set_link(LinkSpec("b", "a", millis(70), symmetric=False))
    assert bus.latency("a", "b") == millis(30)
    assert bus.latency("b", "a") == millis(70)


def test_unknown_nodes_rejected():
    _, bus = make_bus("a")
    with pytest.raises(BusError):
        bus.publish(env("/x", src="ghost"))
    with pytest.raises(BusError):
        bus.set_link(LinkSpec("a", "ghost", 0))
    with pytest.raises(BusError):
        bus.subscribe("ghost", "/x", print)


def test_unsubscribe_drops_in_flight():
    k, bus = make_bus("a", "b")
    seen = []
    sid = bus.subscribe("b", "/x", seen.append)
    bus.set_link(LinkSpec("a", "b", millis(50)))
    bus.publish(env("/x", dst="b"))
    k.run_until(millis(10))
    assert bus.unsubscribe(sid) is True
    assert bus.unsubscribe(sid) is False
    k.run_until(seconds(1))
    assert seen == []


def test_subscription_added_before_delivery_receives():
    k, bus = make_bus("a", "b")
    bus.set_link(LinkSpec("a", "b", millis(50)))
    bus.publish(env("/x", dst="b"))
    seen = []
    k.run_until(millis(10))
    bus.subscribe("b", "/x", seen.append)
    k.run_until(seconds(1))
    assert len(seen) == 1


def test_fifo_per_source_topic():
    k, bus = make_bus("a", "b")
    bus.set_link(LinkSpec("a", "b", millis(20)))
    seqs = []
    bus.subscribe("b", "/x", lambda e: seqs.append(e.sequence))
    for i in range(50):
        bus.publish(env("/x", t=i, dst="b"))
    k.run_until(seconds(1))
    assert seqs == list(range(50))


def test_handler_failure_is_isolated():
    k, bus = make_bus("a")
    seen = []

    def boom(e):
        raise RuntimeError("x")

    bus.subscribe("a", "/x", boom)
    bus.subscribe("a", "/x", seen.append)
    bus.publish(env("/x"))
    k.run_until(1)
    assert len(seen) == 1


def test_shared_route_deduplicates():
    k, bus = make_bus("v", "c")
    got = []
    bus.subscribe("c", "/cloud/p", got.append)
    for owner in ("uplink", "bridge"):
        bus.open_route(owner, "v", "/p", "/cloud/p", "c")
    bus.publish(env("/p", src="v"))
    k.run_until(1)
    assert len(got) == 1
    assert bus.close_route("uplink", "v", "/p", "/cloud/p", "c")
    assert bus.route_active("v", "/p", "/cloud/p", "c")
    bus.publish(env("/p", t=1, src="v"))
    k.run_until(2)
    assert len(got) == 2
    bus.close_route("bridge", "v", "/p", "/cloud/p", "c")
    assert not bus.route_active("v", "/p", "/cloud/p", "c")
    bus.publish(env("/p", t=2, src="v"))
    k.run_until(3)
    assert len(got) == 2
    assert got[0].payload == b"x"
