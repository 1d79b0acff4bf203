"""Simulated cluster control plane.

Holds desired state (one workload per owning application instance) and actual
state (pods with lifecycle phases), and converges the two on periodic
reconcile ticks. Pod behaviors are switched on and off through a behavior host
so that nothing a pod does is observable unless the pod is Running.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

from fleetsim.bus import Bus, LinkSpec
from fleetsim.simkernel import MILLISECOND, SECOND, Kernel, Periodic, seconds

log = logging.getLogger(__name__)

ROLES = ("cloud", "vehicle", "rsu", "edge")

PENDING = "Pending"
STARTING = "Starting"
RUNNING = "Running"
TERMINATING = "Terminating"
TERMINATED = "Terminated"
FAILED = "Failed"

LEGAL_TRANSITIONS = {
    (PENDING, STARTING),
    (STARTING, RUNNING),
    (RUNNING, TERMINATING),
    (RUNNING, FAILED),
    (FAILED, STARTING),
    (TERMINATING, TERMINATED),
    # removal from desired state wins over whatever the pod was doing
    (PENDING, TERMINATED),
    (STARTING, TERMINATING),
    (FAILED, TERMINATING),
}


class ControlPlaneError(ValueError):
    pass


class AdmissionError(ControlPlaneError):
    pass


@dataclass(frozen=True, order=True)
class Resources:
    cpu_milli: int = 0
    mem_mib: int = 0

    def __add__(self, other: Resources) -> Resources:
        return Resources(self.cpu_milli + other.cpu_milli, self.mem_mib + other.mem_mib)

    def __sub__(self, other: Resources) -> Resources:
        return Resources(self.cpu_milli - other.cpu_milli, self.mem_mib - other.mem_mib)

    def fits_in(self, other: Resources) -> bool:
        return self.cpu_milli <= other.cpu_milli and self.mem_mib <= other.mem_mib

    def as_dict(self) -> dict[str, int]:
        return {"cpu_milli": self.cpu_milli, "mem_mib": self.mem_mib}

    @classmethod
    def from_dict(cls, obj: dict) -> Resources:
        return cls(int(obj["cpu_milli"]), int(obj["mem_mib"]))


@dataclass(frozen=True)
class PodSpec:
    pod_name: str
    image_ref: str
    resource_request: Resources
    behavior_kind: str = "generic"
    target_node: str | None = None
    node_role: str | None = None
    config: dict[str, Any] = field(default_factory=dict)
    topic_bindings: dict[str, Any] = field(default_factory=dict)
    startup_latency: int | None = None

    def as_dict(self) -> dict:
        return {
            "pod_name": self.pod_name,
            "image_ref": self.image_ref,
            "resource_request": self.resource_request.as_dict(),
            "behavior_kind": self.behavior_kind,
            "target_node": self.target_node,
            "node_role": self.node_role,
            "config": self.config,
            "topic_bindings": self.topic_bindings,
        }


@dataclass(frozen=True)
class WorkloadDefinition:
    owner: str
    revision: int
    pods: tuple[PodSpec, ...] = ()

    def __post_init__(self) -> None:
        names = [p.pod_name for p in self.pods]
        if len(names) != len(set(names)):
            raise ControlPlaneError(f"duplicate pod names in workload for {self.owner}")


@dataclass(frozen=True)
class NodeStatus:
    node_id: str
    role: str
    capacity: Resources
    allocated: Resources = Resources()
    ready: bool = True


@dataclass(frozen=True)
class PodStatus:
    pod_id: str
    owner: str
    node_id: str | None
    phase: str
    phase_since: int
    restart_count: int = 0
    pod_name: str = ""
    behavior_kind: str = "generic"
    request: Resources = Resources()


@dataclass(frozen=True)
class ReconcileReport:
    tick_time: int
    transitions: tuple[tuple[str, str, str], ...] = ()
    pending_unschedulable: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class ClusterView:
    time: int
    nodes: tuple[NodeStatus, ...]
    pods: tuple[PodStatus, ...]

    def node(self, node_id: str) -> NodeStatus:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def committed(self, node_id: str) -> Resources:
        """Requests of every non-Terminated pod bound to the node, Pending included."""
        total = Resources()
        for p in self.pods:
            if p.node_id == node_id and p.phase != TERMINATED:
                total = total + p.request
        return total

    def residual(self, node_id: str) -> Resources:
        return self.node(node_id).capacity - self.committed(node_id)

    def pods_of(self, owner: str) -> list[PodStatus]:
        return [p for p in self.pods if p.owner == owner]


class BehaviorHost(Protocol):
    def activate(self, pod: PodStatus, spec: PodSpec) -> None: ...

    def deactivate(self, pod: PodStatus, spec: PodSpec, reason: str) -> None: ...


class _NullHost:
    def activate(self, pod: PodStatus, spec: PodSpec) -> None:
        pass

    def deactivate(self, pod: PodStatus, spec: PodSpec, reason: str) -> None:
        pass


@dataclass
class _Pod:
    status: PodStatus
    spec: PodSpec
    ready_at: int | None = None
    remove: bool = False


class ControlPlane:
    def __init__(
        self,
        kernel: Kernel,
        bus: Bus | None = None,
        *,
        startup_latency: int = 5 * SECOND,
        reconcile_interval: int = 250 * MILLISECOND,
        termination_latency: int = 500 * MILLISECOND,
        host: BehaviorHost | None = None,
    ) -> None:
        self.kernel = kernel
        self.bus = bus
        self.startup_latency = startup_latency
        self.reconcile_interval = reconcile_interval
        self.termination_latency = termination_latency
        self.host: BehaviorHost = host or _NullHost()
        self._nodes: dict[str, NodeStatus] = {}
        self._pods: dict[str, _Pod] = {}
        self._desired: dict[str, WorkloadDefinition] = {}
        self._watchers: list[Callable[[ReconcileReport], None]] = []
        self._timer: Periodic | None = None
        self.mutations = 0
        self.history: list[tuple[int, str, str, str]] = []

    # topology -----------------------------------------------------------

    def add_node(self, node_id: str, role: str, capacity: Resources) -> None:
        if role not in ROLES:
            raise ControlPlaneError(f"unknown node role {role!r}")
        if node_id in self._nodes:
            raise ControlPlaneError(f"duplicate node {node_id!r}")
        self._nodes[node_id] = NodeStatus(node_id, role, capacity)
        if self.bus is not None:
            self.bus.add_node(node_id)

    def set_capacity(self, node_id: str, capacity: Resources) -> None:
        node = self._nodes[node_id]
        self._nodes[node_id] = replace(node, capacity=capacity)

    def node_ids(self) -> list[str]:
        return list(self._nodes)

    def watch(self, callback: Callable[[ReconcileReport], None]) -> None:
        self._watchers.append(callback)

    def start(self) -> None:
        if self._timer is None:
            first = -(-self.kernel.now() // self.reconcile_interval) * self.reconcile_interval
            self._timer = self.kernel.every(self.reconcile_interval, self._tick, start=first)

    def stop(self) -> None:
        if self._timer is not None:
            self._timer.stop()
            self._timer = None

    # desired state ------------------------------------------------------

    def _committed_on(self, node_id: str, exclude: set[str] = frozenset()) -> Resources:
        total = Resources()
        for pid, pod in self._pods.items():
            if pid in exclude or pod.status.phase == TERMINATED:
                continue
            if pod.status.node_id == node_id and not pod.remove:
                total = total + pod.spec.resource_request
        return total

    def apply(self, workload: WorkloadDefinition) -> int:
        owner = workload.owner
        previous = self._desired.get(owner)
        if previous is not None and workload.revision < previous.revision:
            raise ControlPlaneError(f"stale revision {workload.revision} for {owner}")

        wanted = {f"{owner}/{p.pod_name}": p for p in workload.pods}
        new_ids = [pid for pid in wanted if pid not in self._pods or self._pods[pid].status.phase == TERMINATED]

        # admission: explicit targets must fit alongside everything already committed
        demand: dict[str, Resources] = {}
        for pid in new_ids:
            spec = wanted[pid]
            if spec.target_node is None:
                if spec.node_role is None:
                    raise AdmissionError(f"pod {pid} has neither target node nor role")
                continue
            if spec.target_node not in self._nodes:
                raise AdmissionError(f"pod {pid} targets unknown node {spec.target_node!r}")
            demand[spec.target_node] = demand.get(spec.target_node, Resources()) + spec.resource_request
        for pid in wanted:
            pod = self._pods.get(pid)
            if pod is not None and pod.status.phase == TERMINATING:
                raise AdmissionError(f"pod {pid} is still terminating")
        for node_id, need in demand.items():
            if not (self._committed_on(node_id) + need).fits_in(self._nodes[node_id].capacity):
                raise AdmissionError(f"insufficient capacity on {node_id} for {owner}")

        now = self.kernel.now()
        changed = False
        for pid, spec in wanted.items():
            pod = self._pods.get(pid)
            if pod is None or pod.status.phase == TERMINATED:
                self._pods[pid] = _Pod(
                    PodStatus(
                        pod_id=pid,
                        owner=owner,
                        node_id=spec.target_node,
                        phase=PENDING,
                        phase_since=now,
                        pod_name=spec.pod_name,
                        behavior_kind=spec.behavior_kind,
                        request=spec.resource_request,
                    ),
                    spec,
                )
                changed = True
            elif pod.spec != spec:
                # in-place reconfiguration: no phase change
                old = pod.spec
                pod.spec = spec
                pod.remove = False
                changed = True
                if pod.status.phase == RUNNING:
                    self.host.deactivate(pod.status, old, "reconfigure")
                    self.host.activate(pod.status, spec)
            elif pod.remove:
                pod.remove = False
                changed = True
        if previous is not None:
            for p in previous.pods:
                pid = f"{owner}/{p.pod_name}"
                if pid not in wanted and pid in self._pods:
                    pod = self._pods[pid]
                    if pod.status.phase not in (TERMINATING, TERMINATED) and not pod.remove:
                        pod.remove = True
                        changed = True
        self._desired[owner] = workload
        if changed:
            self.mutations += 1
        return workload.revision

    def desired(self, owner: str) -> WorkloadDefinition | None:
        return self._desired.get(owner)

    # actual state -------------------------------------------------------

    def _transition(self, pod: _Pod, to: str, now: int, out: list, **changes: Any) -> None:
        frm = pod.status.phase
        if (frm, to) not in LEGAL_TRANSITIONS:
            raise ControlPlaneError(f"illegal transition {frm}->{to} for {pod.status.pod_id}")
        pod.status = replace(pod.status, phase=to, phase_since=now, **changes)
        out.append((pod.status.pod_id, frm, to))
        self.history.append((now, pod.status.pod_id, frm, to))

    def _reserved(self, node_id: str) -> Resources:
        total = Resources()
        for pod in self._pods.values():
            if pod.status.node_id == node_id and pod.status.phase in (STARTING, RUNNING, FAILED, TERMINATING):
                total = total + pod.spec.resource_request
        return total

    def _pick_node(self, spec: PodSpec) -> str | None:
        if spec.target_node is not None:
            return spec.target_node
        best = None
        for node_id, node in sorted(self._nodes.items()):
            if node.role != spec.node_role or not node.ready:
                continue
            residual = node.capacity - self._reserved(node_id)
            if not spec.resource_request.fits_in(residual):
                continue
            left = residual - spec.resource_request
            key = (left.cpu_milli, left.mem_mib, node_id)
            if best is None or key < best[0]:
                best = (key, node_id)
        return None if best is None else best[1]

    def reconcile_tick(self, now: int | None = None) -> ReconcileReport:
        now = self.kernel.now() if now is None else now
        transitions: list[tuple[str, str, str]] = []
        unschedulable: list[tuple[str, str]] = []
        pods = list(self._pods.values())

        for pod in pods:
            if not pod.remove:
                continue
            phase = pod.status.phase
            if phase == PENDING:
                self._transition(pod, TERMINATED, now, transitions)
            elif phase in (STARTING, RUNNING, FAILED):
                was_running = phase == RUNNING
                self._transition(pod, TERMINATING, now, transitions)
                if was_running:
                    self.host.deactivate(pod.status, pod.spec, "terminating")
            pod.remove = False

        for pod in pods:
            st = pod.status
            if st.phase == TERMINATING and now - st.phase_since >= self.termination_latency:
                self._transition(pod, TERMINATED, now, transitions)

        for pod in pods:
            if pod.status.phase == FAILED:
                pod.ready_at = now + self._startup(pod.spec)
                self._transition(pod, STARTING, now, transitions, restart_count=pod.status.restart_count + 1)
            elif pod.status.phase == STARTING and pod.ready_at is not None and now >= pod.ready_at:
                self._transition(pod, RUNNING, now, transitions)
                self.host.activate(pod.status, pod.spec)

        for pod in pods:
            if pod.status.phase != PENDING:
                continue
            node_id = self._pick_node(pod.spec)
            if node_id is None:
                unschedulable.append((pod.status.pod_id, "no-eligible-node"))
                continue
            node = self._nodes[node_id]
            if not (self._reserved(node_id) + pod.spec.resource_request).fits_in(node.capacity):
                unschedulable.append((pod.status.pod_id, "insufficient-capacity"))
                continue
            pod.ready_at = now + self._startup(pod.spec)
            self._transition(pod, STARTING, now, transitions, node_id=node_id)

        self._refresh_allocations()
        report = ReconcileReport(now, tuple(transitions), tuple(unschedulable))
        for watcher in list(self._watchers):
            watcher(report)
        return report

    def _startup(self, spec: PodSpec) -> int:
        return self.startup_latency if spec.startup_latency is None else spec.startup_latency

    def _refresh_allocations(self) -> None:
        for node_id, node in self._nodes.items():
            reserved = self._reserved(node_id)
            if not reserved.fits_in(node.capacity) and reserved != node.allocated:
                # only possible if capacity was lowered under running pods
                log.warning("node %s over capacity: %s > %s", node_id, reserved, node.capacity)
            self._nodes[node_id] = replace(node, allocated=reserved)

    def _tick(self) -> None:
        self.reconcile_tick(self.kernel.now())

    def inject_failure(self, pod_id: str) -> None:
        pod = self._pods.get(pod_id)
        if pod is None or pod.status.phase != RUNNING:
            phase = None if pod is None else pod.status.phase
            raise ControlPlaneError(f"pod {pod_id} is not Running (phase={phase})")
        self._transition(pod, FAILED, self.kernel.now(), [])
        self.host.deactivate(pod.status, pod.spec, "failed")

    def pod(self, pod_id: str) -> PodStatus:
        return self._pods[pod_id].status

    def pod_spec(self, pod_id: str) -> PodSpec:
        return self._pods[pod_id].spec

    def cluster_view(self) -> ClusterView:
        return ClusterView(
            self.kernel.now(),
            tuple(self._nodes[n] for n in sorted(self._nodes)),
            tuple(self._pods[p].status for p in sorted(self._pods)),
        )

    def state_fingerprint(self) -> tuple:
        """Desired plus actual state, for diffing before/after an operation."""
        view = self.cluster_view()
        desired = tuple(sorted((o, w.revision, w.pods) for o, w in self._desired.items()))
        marks = tuple(sorted(pid for pid, p in self._pods.items() if p.remove))
        return (view.nodes, view.pods, desired, marks)


# -- topology file ------------------------------------------------------------


@dataclass(frozen=True)
class Topology:
    nodes: tuple[NodeStatus, ...]
    links: tuple[LinkSpec, ...]


def load_topology(source: str | Path | dict) -> Topology:
    obj = source if isinstance(source, dict) else json.loads(Path(source).read_text())
    nodes = tuple(
        NodeStatus(n["node_id"], n["role"], Resources.from_dict(n["capacity"])) for n in obj.get("nodes", [])
    )
    links = tuple(
        LinkSpec(
            l["endpoint_a"],
            l["endpoint_b"],
            seconds(float(l.get("latency", 0.0))),
            bool(l.get("symmetric", True)),
        )
        for l in obj.get("links", [])
    )
    return Topology(nodes, links)


def build_cluster(plane: ControlPlane, topology: Topology, bus: Bus | None = None) -> None:
    for n in topology.nodes:
        plane.add_node(n.node_id, n.role, n.capacity)
    if bus is not None:
        for link in topology.links:
            bus.set_link(link)


def nodes_with_role(view: ClusterView, role: str) -> Iterable[NodeStatus]:
    return (n for n in view.nodes if n.role == role)
