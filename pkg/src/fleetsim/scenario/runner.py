"""End-to-end C-ITS proximity recording scenario.

Builds the cluster, starts vehicle publishers and the bootstrap deployment
(one pose uplink per vehicle plus the cloud operator application), runs the
kernel, and assembles a report from what the managers, detectors, control
plane and stores observed.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from fleetsim.app_manager import AppManager, compose, place
from fleetsim.bus import Bus, MessageEnvelope
from fleetsim.control_plane import (
    RUNNING,
    TERMINATED,
    TERMINATING,
    ControlPlane,
    PodSpec,
    PodStatus,
    build_cluster,
)
from fleetsim.event_detector import (
    CapabilityRequest,
    DetectorConfig,
    EventDetector,
    OperatorPlugin,
    PluginBinding,
    RecordingPlugin,
    TaskRule,
    summarize_cycles,
)
from fleetsim.recorder import RecordStore, store_filename
from fleetsim.scenario.config import ConfigError, ScenarioConfig, validate_config
from fleetsim.scenario.motion import Fleet, Route, random_route
from fleetsim.scenario.payloads import CLOUD_TAG, POSE_TAG, encode_pose, synth_cloud
from fleetsim.scenario.proximity import ENTERED, LEFT, ProximityAnalyzer
from fleetsim.simkernel import SECOND, Kernel, seconds, to_seconds

log = logging.getLogger(__name__)

BOOTSTRAP = "bootstrap"
SCHEMA_VERSION = 1
# keys whose values are wall-clock measurements; excluded from determinism checks
WALL_CLOCK_KEYS = frozenset(
    {"translation_ms", "storage_s", "storage_s_per_10s", "wall_clock", "wall_clock_write_time"}
)


def vehicle_node(vid: int) -> str:
    return f"vehicle-{vid}"


def pose_topic(vid: int) -> str:
    return f"/vehicle/{vid}/pose"


def points_topic(vid: int) -> str:
    return f"/vehicle/{vid}/points"


def build_fleet(cfg: ScenarioConfig, kernel: Kernel) -> Fleet:
    given = {r.vehicle_id: r.build() for r in cfg.routes}
    routes: dict[int, Route] = {}
    for vid in range(cfg.N):
        # draw for every vehicle so configured routes never shift the random stream
        generated = random_route(kernel.rng)
        routes[vid] = given.get(vid, generated)
    return Fleet(routes)


@dataclass
class ScenarioReport:
    episodes: list[dict]
    latency: dict[str, list]
    store_stats: list[dict]
    decisions: list[dict]
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "episodes": self.episodes,
            "latency": self.latency,
            "decisions": self.decisions,
            "store_stats": self.store_stats,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def strip_wall_clock(obj: Any) -> Any:
    """Drop wall-clock fields so two reports can be compared byte for byte."""
    if isinstance(obj, dict):
        return {k: strip_wall_clock(v) for k, v in obj.items() if k not in WALL_CLOCK_KEYS}
    if isinstance(obj, list):
        return [strip_wall_clock(v) for v in obj]
    return obj


class Simulation:
    """One scenario run; also the behavior host for the control plane."""

    def __init__(self, cfg: ScenarioConfig, out_dir: str | Path) -> None:
        diags = validate_config(cfg)
        if diags:
            raise ConfigError(diags)
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.kernel = Kernel(cfg.seed)
        self.bus = Bus(self.kernel)
        self.plane = ControlPlane(
            self.kernel,
            self.bus,
            startup_latency=seconds(cfg.startup_latency),
            reconcile_interval=seconds(cfg.reconcile_interval),
            termination_latency=seconds(cfg.termination_latency),
            host=self,
        )
        self.topology = cfg.topology()
        build_cluster(self.plane, self.topology, self.bus)
        self.registry = cfg.load_registry()
        self.fleet = build_fleet(cfg, self.kernel)
        self.lidar = list(range(cfg.M))
        self.cloud_node = sorted(n.node_id for n in self.topology.nodes if n.role == "cloud")[0]

        self.managers: dict[str, AppManager] = {}
        self.detectors: list[tuple[str, EventDetector]] = []
        self._active: dict[str, Any] = {}
        self.stores: dict[Path, RecordStore] = {}
        self.store_owner: dict[Path, str] = {}
        self.operator_plugins: dict[str, list[OperatorPlugin]] = {}
        self.cloud_deliveries: list[tuple[str, str, int]] = []
        self.bus.add_observer(self._observe)
        self.wall_clock_s = 0.0
        self._finished = False

    # behavior host ---------------------------------------------------------

    def activate(self, pod: PodStatus, spec: PodSpec) -> None:
        kind = spec.behavior_kind
        if kind == "bridge":
            routes = self._bridge_routes(pod, spec)
            for r in routes:
                self.bus.open_route(pod.pod_id, *r)
            self._active[pod.pod_id] = routes
        elif kind == "recorder":
            self._active[pod.pod_id] = self._start_recorder(pod, spec)
        elif kind == "operator":
            self._active[pod.pod_id] = self._start_operator(pod, spec)

    def deactivate(self, pod: PodStatus, spec: PodSpec, reason: str) -> None:
        state = self._active.pop(pod.pod_id, None)
        if state is None:
            return
        kind = spec.behavior_kind
        if kind == "bridge":
            for r in state:
                self.bus.close_route(pod.pod_id, *r)
        elif kind == "recorder":
            det, store = state
            det.stop()
            if reason == "terminating":
                store.close()
        elif kind == "operator":
            det, manager = state
            det.stop()
            manager.detach()
            if reason == "terminating":
                manager.shutdown_all()

    def _bridge_routes(self, pod: PodStatus, spec: PodSpec) -> list[tuple[str, str, str, str]]:
        subs = spec.topic_bindings.get("subscribes", [])
        pubs = spec.topic_bindings.get("publishes", [])
        sink = spec.config.get("sink_node") or self.cloud_node
        return [(pod.node_id, src, dst, sink) for src, dst in zip(subs, pubs)]

    def _start_recorder(self, pod: PodStatus, spec: PodSpec) -> tuple[EventDetector, RecordStore]:
        workload = self.plane.desired(pod.owner)
        revision = workload.revision if workload is not None else 1
        key = spec.config.get("correlation_key", pod.owner)
        path = self.out_dir / store_filename(key, revision)
        store = self.stores.get(path)
        if store is None or store.closed:
            store = self.stores[path] = RecordStore(path)
            self.store_owner[path] = pod.pod_id
        patterns = list(spec.topic_bindings.get("subscribes", []))
        det = EventDetector(
            self.kernel,
            self.bus,
            pod.node_id,
            DetectorConfig(
                subscriptions=patterns,
                buffer_duration=seconds(self.cfg.buffer_duration),
                analysis_period=seconds(self.cfg.analysis_period),
                plugins=[PluginBinding(RecordingPlugin(self.kernel, store, patterns))],
            ),
            name=pod.pod_id,
        )
        det.start()
        self.detectors.append((pod.pod_id, det))
        return det, store

    def _start_operator(self, pod: PodStatus, spec: PodSpec) -> tuple[EventDetector, AppManager]:
        manager = self.managers.get(pod.pod_id)
        if manager is None:
            manager = self.managers[pod.pod_id] = AppManager(
                self.kernel,
                self.plane,
                self.registry,
                name=pod.pod_id.replace("/", "."),
                bus=self.bus,
                home_node=pod.node_id,
                issuer=pod.pod_id,
                strategy=self.cfg.conflict_strategy,
                retry_interval=seconds(self.cfg.retry_interval),
                restart_on_reconfigure=self.cfg.restart_on_reconfigure,
            )
        manager.attach()
        conf = spec.config.get("analyzer", {})
        analyzer = ProximityAnalyzer(conf["vehicles"], conf["d_start"], conf["d_stop"])
        rules = [TaskRule.from_dict(r) for r in spec.config.get("rules", [])]
        plugin = OperatorPlugin(
            self.kernel,
            self.bus,
            pod.node_id,
            issuer=pod.pod_id,
            rules=rules,
            constants={"d_start": analyzer.d_start, "d_stop": analyzer.d_stop},
        )
        self.operator_plugins.setdefault(pod.pod_id, []).append(plugin)
        det = EventDetector(
            self.kernel,
            self.bus,
            pod.node_id,
            DetectorConfig(
                subscriptions=list(spec.topic_bindings.get("subscribes", [])),
                buffer_duration=seconds(self.cfg.buffer_duration),
                analysis_period=seconds(self.cfg.analysis_period),
                analyzers=[analyzer],
                plugins=[PluginBinding(plugin, frozenset(plugin.rules))],
            ),
            name=pod.pod_id,
        )
        det.start()
        self.detectors.append((pod.pod_id, det))
        return det, manager

    def _observe(self, node: str, env: MessageEnvelope, _handlers: int) -> None:
        if env.schema_tag == CLOUD_TAG and not node.startswith("vehicle-"):
            self.cloud_deliveries.append((node, env.topic, self.kernel.now()))

    # vehicles ----------------------------------------------------------------

    def _publish_poses(self) -> None:
        now = self.kernel.now()
        publish = self.bus.publish
        for vid in range(self.cfg.N):
            pose = self.fleet.pose_at(vid, now)
            publish(MessageEnvelope(pose_topic(vid), now, vehicle_node(vid), POSE_TAG, encode_pose(pose)))

    def _publish_clouds(self) -> None:
        now = self.kernel.now()
        for vid in self.lidar:
            cloud = synth_cloud(vid, now, self.cfg.seed, self.cfg.points_per_cloud)
            self.bus.publish(MessageEnvelope(points_topic(vid), now, vehicle_node(vid), CLOUD_TAG, cloud.encode()))

    def _inject_fault(self, pod_name: str) -> None:
        for pod in self.plane.cluster_view().pods:
            if pod.phase == RUNNING and pod.pod_name.startswith(pod_name):
                self.plane.inject_failure(pod.pod_id)
                return
        log.warning("fault injection: no Running pod named %s*", pod_name)

    # run -------------------------------------------------------------------------

    def bootstrap(self) -> None:
        cfg = self.cfg
        caps = [CapabilityRequest("pose-uplink", 1, {"id": vid}) for vid in range(cfg.N)]
        caps.append(
            CapabilityRequest(
                cfg.operator_capability,
                1,
                {"lidar": self.lidar, "d_start": float(cfg.d_start), "d_stop": float(cfg.d_stop), "rules": cfg.operator_rules},
            )
        )
        app = compose(caps, self.registry, {"correlation_key": BOOTSTRAP, "instance": BOOTSTRAP})
        workload = place(app, self.plane.cluster_view(), owner=BOOTSTRAP, placement_hint="cloud", home_node=self.cloud_node)
        self.plane.apply(workload)
        self.kernel.every(seconds(1.0 / cfg.f_p), self._publish_poses, start=0)
        if self.lidar:
            self.kernel.every(seconds(1.0 / cfg.f_pc), self._publish_clouds, start=0)
        for fault in cfg.faults:
            self.kernel.schedule(self._inject_fault, seconds(fault.at), fault.pod_name)
        self.plane.start()

    def run(self) -> ScenarioReport:
        started = time.perf_counter()
        self.bootstrap()
        self.kernel.run_until(seconds(self.cfg.duration))
        self.finish()
        self.wall_clock_s = time.perf_counter() - started
        return self.report()

    def finish(self) -> None:
        if self._finished:
            return
        self._finished = True
        for _, det in self.detectors:
            if det.running:
                for binding in det.config.plugins:
                    flush = getattr(binding.plugin, "flush", None)
                    if flush is not None:
                        flush()
        for store in self.stores.values():
            store.close()

    # report ------------------------------------------------------------------------

    def root_operator(self) -> str | None:
        ops = [p for p in self.operator_plugins if p.startswith(BOOTSTRAP + "/")]
        return ops[0] if ops else None

    def running_windows(self, pod_id: str, end_at: str = "leave") -> list[tuple[int, int]]:
        """Intervals during which the pod was Running.

        ``end_at="terminated"`` extends an interval that ended in Terminating
        up to the Terminated transition.
        """
        horizon = self.kernel.now()
        windows: list[tuple[int, int]] = []
        start = None
        for t, pid, frm, to in self.plane.history:
            if pid != pod_id:
                continue
            if to == RUNNING:
                start = t
            elif frm == RUNNING and start is not None:
                windows.append((start, t))
                start = None
            elif to == TERMINATED and end_at == "terminated" and windows and frm == TERMINATING:
                windows[-1] = (windows[-1][0], t)
        if start is not None:
            windows.append((start, horizon))
        return windows

    def _first_true(self, i: int, j: int, emitted: int, lower: int) -> int:
        """Earliest pose-grid time before ``emitted`` from which d <= d_start held continuously."""
        step = seconds(1.0 / self.cfg.f_p)
        t = (emitted // step) * step
        while t - step >= lower and self.fleet.distance(i, j, t - step) <= self.cfg.d_start:
            t -= step
        return t

    def bandwidth_violations(self) -> int:
        windows: dict[tuple[str, str], list[tuple[int, int]]] = {}
        for pod in self.plane.cluster_view().pods:
            spec = self.plane.pod_spec(pod.pod_id)
            if spec.behavior_kind != "bridge":
                continue
            sink = spec.config.get("sink_node") or self.cloud_node
            for topic in spec.topic_bindings.get("publishes", []):
                windows.setdefault((sink, topic), []).extend(self.running_windows(pod.pod_id, "terminated"))
        bad = 0
        for node, topic, t in self.cloud_deliveries:
            if not any(a <= t <= b for a, b in windows.get((node, topic), [])):
                bad += 1
        return bad

    def report(self) -> ScenarioReport:
        cfg = self.cfg
        root = self.root_operator()
        manager = self.managers.get(root) if root else None
        ready = self.running_windows(root)[0][0] if root and self.running_windows(root) else 0
        events = [e for pid, det in self.detectors if pid == root for e in det.events]
        issued = {
            (td.correlation_key, td.issued_at, td.intent): td
            for plugin in self.operator_plugins.get(root, [])
            for td in plugin.issued
        }
        decisions_by_request = {}
        if manager is not None:
            for d in manager.decisions:
                decisions_by_request.setdefault(d.request_id, []).append(d)

        episodes: list[dict] = []
        open_eps: dict[str, dict] = {}
        for ev in events:
            if ev.event_type == ENTERED:
                i, j = ev.attributes["vehicles"]
                td = issued.get((ev.correlation_key, ev.detected_at, "deploy"))
                ep = {
                    "pair": [i, j],
                    "correlation_key": ev.correlation_key,
                    "t_enter": to_seconds(ev.detected_at),
                    "t_leave": None,
                    "instance_id": None,
                    "request_id": td.request_id if td else None,
                    "detection_ms": to_seconds(ev.detected_at - self._first_true(i, j, ev.detected_at, ready)) * 1e3,
                }
                self._attach_instance(ep, manager, decisions_by_request)
                episodes.append(ep)
                open_eps[ev.correlation_key] = ep
            elif ev.event_type == LEFT and ev.correlation_key in open_eps:
                open_eps.pop(ev.correlation_key)["t_leave"] = to_seconds(ev.detected_at)

        # samples only; episodes without a measurement are skipped
        latency = {
            key: [ep[key] for ep in episodes if ep.get(key) is not None]
            for key in ("detection_ms", "translation_ms", "reconciliation_s", "storage_s")
        }

        decisions = []
        for name, mgr in self.managers.items():
            for d in mgr.decisions:
                decisions.append({"manager": mgr.name, **d.as_dict()})
        decisions.sort(key=lambda d: (d["decided_at"], d["manager"]))

        instances = []
        for mgr in self.managers.values():
            for inst in mgr.instances.values():
                instances.append(self._instance_dict(mgr, inst))

        store_stats = []
        for path in sorted(self.stores):
            st = self.stores[path].stats().as_dict()
            st["path"] = path.name
            st["owner_pod"] = self.store_owner[path]
            store_stats.append(st)

        dynamic = [p for p in self.plane.cluster_view().pods if p.owner != BOOTSTRAP]
        cycles = [ms for pid, det in self.detectors if pid == root for ms in det.cycle_wall_ms]
        extra = {
            "scenario": {
                k: getattr(cfg, k)
                for k in ("N", "M", "f_p", "f_pc", "d_start", "d_stop", "duration", "seed", "points_per_cloud",
                          "startup_latency", "reconcile_interval", "termination_latency", "analysis_period",
                          "buffer_duration", "conflict_strategy")
            },
            "operator_ready_at": to_seconds(ready),
            "instances": instances,
            "pods": {
                "dynamic_launched": len(dynamic),
                "dynamic_running_at_end": sum(1 for p in dynamic if p.phase == RUNNING),
                "dynamic_terminated_at_end": sum(1 for p in dynamic if p.phase == TERMINATED),
                "restarts": sum(p.restart_count for p in self.plane.cluster_view().pods),
            },
            "bandwidth": {
                "pointcloud_deliveries_off_vehicle": len(self.cloud_deliveries),
                "outside_bridge_windows": self.bandwidth_violations(),
            },
            "detector": {
                "analyzer_failures": sum(det.analyzer_failures for _, det in self.detectors),
                "plugin_failures": sum(det.plugin_failures for _, det in self.detectors),
            },
            "kernel": {"events_fired": self.kernel.events_fired, "final_time": to_seconds(self.kernel.now())},
            "bus": {"published": self.bus.published, "delivered": self.bus.delivered},
            "wall_clock": {"run_s": self.wall_clock_s, "analysis_cycle_ms": summarize_cycles(cycles)},
        }
        return ScenarioReport(episodes, latency, store_stats, decisions, extra)

    def _attach_instance(self, ep: dict, manager: AppManager | None, decisions_by_request: dict) -> None:
        if manager is None or ep["request_id"] is None:
            return
        ds = decisions_by_request.get(ep["request_id"], [])
        if not ds:
            return
        first = ds[0]
        ep["decision"] = first.kind
        ep["translation_ms"] = first.translation_ms
        ep["instance_id"] = first.instance_id
        inst = manager.instances.get(first.instance_id) if first.instance_id else None
        if inst is None:
            return
        ep["pods"] = [p.split("/", 1)[1] for p in inst.owned_pods]
        if inst.running_at is not None and inst.applied_at is not None:
            ep["reconciliation_s"] = to_seconds(inst.running_at - inst.applied_at)
        recorders = [p for p in self._owned_transitively(inst) if self.plane.pod_spec(p).behavior_kind == "recorder"]
        windows = [w for p in recorders for w in self.running_windows(p)]
        ep["recording_windows"] = [[to_seconds(a), to_seconds(b)] for a, b in windows]
        paths = [path for path, owner in self.store_owner.items() if owner in recorders]
        if paths:
            stats = [self.stores[p].stats() for p in paths]
            ep["store"] = [p.name for p in paths]
            ep["entries"] = sum(s.entries_written for s in stats)
            ep["storage_s"] = sum(s.wall_clock_write_time for s in stats)
            span = sum(b - a for a, b in windows)
            ep["storage_s_per_10s"] = ep["storage_s"] * 10 * SECOND / span if span else None

    def _owned_transitively(self, inst) -> list[str]:
        """Pods of ``inst`` plus pods launched by operator pods it owns, recursively."""
        out = []
        stack = [inst]
        while stack:
            cur = stack.pop()
            for pod_id in cur.owned_pods:
                out.append(pod_id)
                child = self.managers.get(pod_id)
                if child is not None:
                    stack.extend(child.instances.values())
        return out

    def _instance_dict(self, mgr: AppManager, inst) -> dict:
        def t(v: int | None) -> float | None:
            return None if v is None else to_seconds(v)

        return {
            "manager": mgr.name,
            "instance_id": inst.instance_id,
            "correlation_key": inst.correlation_key,
            "state": inst.state,
            "revision": inst.workload_revision,
            "pods": list(inst.owned_pods),
            "pod_phases": {p: self.plane.pod(p).phase for p in inst.owned_pods},
            "applied_at": t(inst.applied_at),
            "running_at": t(inst.running_at),
            "terminating_at": t(inst.terminating_at),
            "terminated_at": t(inst.terminated_at),
            "retries": inst.retries,
        }


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path) -> ScenarioReport:
    return Simulation(cfg, out_dir).run()
