
import pytest
from hypothesis import given, settings, strategies as st

from fleetsim.bus import Bus, MessageEnvelope, matches
from fleetsim.event_detector import (
    TASK_TOPIC,
    BufferView,
    CapabilityRequest,
    DetectorConfig,
    DetectorError,
    Event,
    EventDetector,
    OperatorPlugin,
    PluginBinding,
    RecordingPlugin,
    RingBuffer,
    TaskDescription,
    TaskRule,
    pair_key,
)
from fleetsim.recorder import RecordStore, iter_entries
from fleetsim.scenario.payloads import encode_pose
from fleetsim.scenario.motion import Pose
from fleetsim.scenario.proximity import ENTERED, LEFT, ProximityAnalyzer
from fleetsim.simkernel import SECOND, Kernel, millis, seconds


def env(topic, t, seq=0, payload=b"p"):
    return MessageEnvelope(topic, t, "n", "raw", payload, sequence=seq)


def pose_env(vid, t, x, y, src="n"):
    return MessageEnvelope(f"/cloud/vehicle/{vid}/pose", t, src, "pose", encode_pose(Pose(vid, t, x, y, 0.0)))


class TestRingBuffer:
    def test_window_of_one_hertz_stream(self):
        buf = RingBuffer(seconds(10))
        for s in range(16):
            buf.append(env("/a", seconds(s), s), seconds(s))
        got = [e.publish_time for e in buf.query("#", 0, seconds(15), seconds(15))]
        assert got == [seconds(s) for s in range(6, 16)]

    def test_equal_publish_times_keep_sequence_order(self):
        buf = RingBuffer(seconds(1))
        buf.append(env("/a", 5, 1), 5)
        buf.append(env("/a", 5, 0), 5)
        assert [e.sequence for e in buf.entries("/a")] == [0, 1]

    def test_hundred_hertz_holds_at_most_thousand(self):
        buf = RingBuffer(seconds(10))
        peak = 0
        for i in range(3000):
            t = i * SECOND // 100
            buf.append(env("/v/0/pose", t, i), t)
            peak = max(peak, buf.count("/v/0/pose"))
        assert peak == 1000

    def test_query_older_than_horizon_is_empty(self):
        buf = RingBuffer(seconds(2))
        for s in range(10):
            buf.append(env("/a", seconds(s), s), seconds(s))
        assert buf.query("#", 0, seconds(5), seconds(9)) == []

    def test_query_rejects_inverted_interval(self):
        with pytest.raises(DetectorError):
            RingBuffer(10).query("#", 5, 4, 5)

    def test_interleaved_query_is_globally_ordered(self):
        buf = RingBuffer(seconds(10))
        concat = []
        for v in range(3):
            for i in range(20):
                t = millis(i * 10 + v * 3)
                e = env(f"/vehicle/{v}/pose", t, i)
                buf.append(e, millis(300))
                concat.append(e)
        buf.append(env("/vehicle/0/points", millis(5)), millis(300))
        got = buf.query("/vehicle/+/pose", 0, seconds(1), millis(300))
        assert got == sorted(concat, key=lambda e: (e.publish_time, e.sequence))


@settings(max_examples=300, deadline=None)
@given(
    st.integers(1, 50),
    st.lists(
        st.one_of(
            st.tuples(st.just("add"), st.sampled_from(["/a", "/b/c", "/b/d"]), st.integers(0, 20)),
            st.tuples(st.just("advance"), st.integers(0, 30)),
            st.tuples(st.just("query"), st.sampled_from(["#", "/a", "/b/+", "/b/#"]), st.integers(0, 200), st.integers(0, 200)),
        ),
        max_size=80,
    ),
)
def test_retention_matches_list_oracle(duration, ops):
    buf = RingBuffer(duration)
    oracle = []
    now = 0
    seq = 0
    for op in ops:
        if op[0] == "advance":
            now += op[1]
        elif op[0] == "add":
            t = max(0, now - op[2])
            e = env(op[1], t, seq)
            seq += 1
            buf.append(e, now)
            oracle.append(e)
        else:
            lo, hi = sorted(op[2:])
            got = buf.query(op[1], lo, hi, now)
            want = sorted(
                (e for e in oracle if e.publish_time > now - duration and lo <= e.publish_time <= hi and matches(op[1], e.topic)),
                key=lambda e: (e.publish_time, e.sequence),
            )
            assert got == want
            assert all(e.publish_time > now - duration for e in got)


class Counting:
    name = "counting"

    def initial_state(self):
        return {"n": 0}

    def analyze(self, now, view, state):
        state["n"] += 1
        return [Event("tick", now, "k", {"n": state["n"]})]


class Broken:
    name = "broken"

    def initial_state(self):
        return None

    def analyze(self, now, view, state):
        raise ValueError("malformed payload")


class Collect:
    def __init__(self, log, tag):
        self.log, self.tag = log, tag

    def on_event(self, event):
        self.log.append((self.tag, event.event_type))


class Explode:
    def on_event(self, event):
        raise RuntimeError("plugin down")


def make_detector(analyzers=(), plugins=(), subs=("#",)):
    k = Kernel()
    bus = Bus(k)
    bus.add_node("cloud")
    det = EventDetector(k, bus, "cloud", DetectorConfig(list(subs), analyzers=list(analyzers), plugins=list(plugins)))
    return k, bus, det


class TestDetector:
    def test_no_analyzers_no_events(self):
        _, _, det = make_detector()
        assert det.analysis_cycle() == []

    def test_failing_analyzer_is_isolated(self):
        _, _, det = make_detector([Broken(), Counting()])
        events = det.analysis_cycle()
        assert [e.event_type for e in events] == ["tick"]
        assert det.analyzer_failures == 1

    def test_events_in_declaration_order(self):
        _, _, det = make_detector([Counting(), Counting()])
        assert len(det.analysis_cycle()) == 2

    def test_dispatch_order_filters_and_isolation(self):
        log = []
        plugins = [
            PluginBinding(Collect(log, "first")),
            PluginBinding(Explode()),
            PluginBinding(Collect(log, "only-left"), event_types={"left"}),
            PluginBinding(Collect(log, "second")),
        ]
        _, _, det = make_detector(plugins=plugins)
        det.dispatch(Event("tick", 0, "k"))
        assert log == [("first", "tick"), ("second", "tick")]
        assert det.plugin_failures == 1

    def test_periodic_cycles_on_grid(self):
        k, _, det = make_detector([Counting()])
        det.start()
        k.run_until(seconds(1))
        assert det.cycles == 11
        det.stop()
        k.run_until(seconds(2))
        assert det.cycles == 11

    def test_ingest_via_bus_and_query(self):
        k, bus, det = make_detector(subs=["/cloud/vehicle/+/pose"])
        det.start()
        bus.publish(pose_env(0, 0, 1.0, 2.0, src="cloud"))
        bus.publish(MessageEnvelope("/cloud/vehicle/0/points", 0, "cloud", "pointcloud", b"x"))
        k.run_until(millis(50))
        got = det.query_window("#", 0, seconds(1))
        assert [e.topic for e in got] == ["/cloud/vehicle/0/pose"]

    def test_config_validation(self):
        with pytest.raises(DetectorError):
            DetectorConfig([])
        with pytest.raises(DetectorError):
            DetectorConfig(["#"], buffer_duration=0)


class TestProximity:
    def run_cycle(self, analyzer, state, positions, now=0):
        buf = RingBuffer(seconds(15))
        for vid, (x, y) in positions.items():
            buf.append(pose_env(vid, now, x, y), now)
        return analyzer.analyze(now, BufferView(buf, now), state)

    def test_boundary_inclusive_and_hysteresis(self):
        a = ProximityAnalyzer([0, 1], 400, 500)
        state = a.initial_state()
        assert [e.event_type for e in self.run_cycle(a, state, {0: (0, 0), 1: (400.0, 0)})] == [ENTERED]
        assert self.run_cycle(a, state, {0: (0, 0), 1: (450, 0)}) == []
        assert self.run_cycle(a, state, {0: (0, 0), 1: (500, 0)}) == []
        left = self.run_cycle(a, state, {0: (0, 0), 1: (500.001, 0)})
        assert [e.event_type for e in left] == [LEFT]
        assert left[0].correlation_key == "pair:0-1"

    def test_enter_at_350(self):
        a = ProximityAnalyzer([0, 1], 400, 500)
        state = a.initial_state()
        assert self.run_cycle(a, state, {0: (0, 0), 1: (900, 0)}) == []
        ev = self.run_cycle(a, state, {0: (0, 0), 1: (350, 0)})
        assert len(ev) == 1 and ev[0].attributes["distance"] == 350

    def test_missing_pose_skips_pair(self):
        a = ProximityAnalyzer([0, 1, 2], 400, 500)
        state = a.initial_state()
        ev = self.run_cycle(a, state, {0: (0, 0), 1: (10, 0)})
        assert [e.correlation_key for e in ev] == ["pair:0-1"]

    def test_pair_key_is_order_free(self):
        assert pair_key(14, 3) == pair_key(3, 14) == "pair:3-14"


def test_operator_plugin_publishes_task():
    k, bus, _ = make_detector()
    received = []
    bus.subscribe("cloud", TASK_TOPIC, lambda e: received.append(TaskDescription.decode(e.payload)))
    rule = TaskRule.from_dict(
        {
            "event_type": ENTERED,
            "intent": "deploy",
            "capabilities": [{"tag": "pose-bridge", "count": 2, "params": {"vehicles": "{vehicles}"}}],
            "data_sources": ["/cloud/vehicle/{a}/pose"],
            "placement_hint": "cloud",
        }
    )
    plugin = OperatorPlugin(k, bus, "cloud", "op", [rule])
    plugin.on_event(Event(ENTERED, 7, "pair:0-14", {"vehicles": [0, 14], "a": 0}))
    plugin.on_event(Event("unbound", 7, "x"))
    k.run_until(10)
    assert len(received) == 1
    td = received[0]
    assert td.intent == "deploy" and td.issuer == "op"
    assert td.required_capabilities == (CapabilityRequest("pose-bridge", 2, {"vehicles": [0, 14]}),)
    assert td.data_sources == ("/cloud/vehicle/0/pose",)
    assert TaskDescription.decode(td.encode()) == td


def test_task_problems():
    assert TaskDescription("r", "k", "deploy").problems()
    assert TaskDescription("r", "k", "explode", (CapabilityRequest("x"),)).problems()
    assert TaskDescription("r", "k", "shutdown").problems() == []


class TestRecordingPlugin:
    def setup_plugin(self, tmp_path, patterns=("/cloud/vehicle/0/pose",)):
        k = Kernel()
        store = RecordStore(tmp_path / "s.ndjson")
        return k, store, RecordingPlugin(k, store, list(patterns))

    def test_pass_through_byte_identity(self, tmp_path):
        k, store, plugin = self.setup_plugin(tmp_path)
        payload = bytes(range(256)) * 3
        plugin.on_envelope(MessageEnvelope("/cloud/vehicle/0/pose", 5, "n", "pose", payload))
        plugin.on_envelope(MessageEnvelope("/cloud/vehicle/1/pose", 5, "n", "pose", b"no"))
        plugin.close()
        store.close()
        entries = list(iter_entries(store.path))
        assert len(entries) == 1 and entries[0].payload == payload

    def test_retry_once_then_drop(self, tmp_path):
        k, store, plugin = self.setup_plugin(tmp_path, ["#"])
        plugin.on_envelope(env("/a", 0))
        store.inject_io_failures(1)
        plugin.flush()
        assert store.stats().entries_written == 1 and store.stats().dropped == 0
        plugin.on_envelope(env("/a", 1))
        store.inject_io_failures(2)
        plugin.flush()
        stats = store.stats()
        assert stats.dropped == 1 and stats.entries_written == 1
        assert stats.entries_written == stats.appended - stats.dropped

    def test_ten_second_batch_count(self, tmp_path):
        # (f_p + f_pc) x 2 vehicles x 10 s
        k, store, plugin = self.setup_plugin(tmp_path, ["/cloud/vehicle/+/pose", "/cloud/vehicle/+/points"])
        for v in (0, 1):
            for i in range(1000):
                plugin.on_envelope(env(f"/cloud/vehicle/{v}/pose", i * SECOND // 100))
            for i in range(100):
                plugin.on_envelope(env(f"/cloud/vehicle/{v}/points", i * SECOND // 10))
        plugin.flush()
        assert store.stats().entries_written == 2200
