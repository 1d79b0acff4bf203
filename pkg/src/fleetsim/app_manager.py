"""Application manager: task descriptions in, workloads out.

A manager receives high-level task descriptions, composes applications from
verified registry templates, places their pods, and applies the result to the
control plane. Requests are intents: the manager may reject or postpone them,
and in both cases it leaves the cluster untouched.
"""

from __future__ import annotations

import json
import logging
import string
import time
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Any, Iterable, Sequence

from fleetsim.bus import Bus, MessageEnvelope, validate_topic
from fleetsim.control_plane import (
    RUNNING,
    TERMINATED,
    AdmissionError,
    ClusterView,
    ControlPlane,
    PodSpec,
    ReconcileReport,
    Resources,
    WorkloadDefinition,
)
from fleetsim.event_detector import DECISION_TOPIC, TASK_TOPIC, CapabilityRequest, TaskDescription
from fleetsim.simkernel import SECOND, Kernel, seconds

log = logging.getLogger(__name__)

BEHAVIOR_KINDS = ("bridge", "recorder", "operator", "generic")
STRATEGIES = ("cancel", "postpone", "offload")
# filled in by place() once the application's data sink has a node
SINK_NODE = "sink_node"

__all__ = [
    "AppManager",
    "ApplicationInstance",
    "CompositionError",
    "Decision",
    "MicroserviceTemplate",
    "PlacementError",
    "Registry",
    "RegistryEntry",
    "ResolvedService",
    "WorkloadDefinition",
    "compose",
    "load_registry",
    "place",
]


class CompositionError(ValueError):
    pass


class PlacementError(ValueError):
    pass


_TYPES = {"int": int, "float": (int, float), "str": str, "list": list, "bool": bool, "dict": dict}


@dataclass(frozen=True)
class MicroserviceTemplate:
    name: str
    capability_tags: frozenset[str]
    image_ref: str
    resource_request: Resources
    behavior_kind: str = "generic"
    config_params: dict[str, str] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    publishes: tuple[str, ...] = ()
    subscribes: tuple[str, ...] = ()
    node_selector: str | None = None
    default_role: str | None = None
    startup_latency: float | None = None

    def __post_init__(self) -> None:
        if self.resource_request.cpu_milli <= 0 or self.resource_request.mem_mib <= 0:
            raise ValueError(f"template {self.name}: resource_request must be positive")
        if self.behavior_kind not in BEHAVIOR_KINDS:
            raise ValueError(f"template {self.name}: unknown behavior_kind {self.behavior_kind!r}")
        for typ in self.config_params.values():
            if typ not in _TYPES:
                raise ValueError(f"template {self.name}: unknown param type {typ!r}")
        for t in self.publishes + self.subscribes:
            # placeholders are checked after substitution; the frame must still be a topic
            validate_topic(_placeholder_free(t))

    @classmethod
    def from_dict(cls, obj: dict) -> MicroserviceTemplate:
        return cls(
            name=obj["name"],
            capability_tags=frozenset(obj["capability_tags"]),
            image_ref=obj["image_ref"],
            resource_request=Resources.from_dict(obj["resource_request"]),
            behavior_kind=obj.get("behavior_kind", "generic"),
            config_params=dict(obj.get("config_params", {})),
            config=dict(obj.get("config", {})),
            publishes=tuple(obj.get("publishes", ())),
            subscribes=tuple(obj.get("subscribes", ())),
            node_selector=obj.get("node_selector"),
            default_role=obj.get("default_role"),
            startup_latency=obj.get("startup_latency"),
        )


def _placeholder_free(template: str) -> str:
    return "".join(lit + ("x" if fld is not None else "") for lit, fld, _, _ in string.Formatter().parse(template))


@dataclass(frozen=True)
class RegistryEntry:
    application_name: str
    services: tuple[MicroserviceTemplate, ...]
    verified: bool = False


class Registry:
    def __init__(self, entries: Iterable[RegistryEntry]) -> None:
        self.entries = tuple(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def candidates(self, tag: str, verified_only: bool = True) -> list[MicroserviceTemplate]:
        found = [
            svc
            for entry in self.entries
            if entry.verified or not verified_only
            for svc in entry.services
            if tag in svc.capability_tags
        ]
        return sorted(found, key=lambda s: s.name)


def load_registry(source: str | Path | dict) -> Registry:
    obj = source if isinstance(source, dict) else json.loads(Path(source).read_text())
    entries = []
    for e in obj.get("entries", []):
        services = tuple(MicroserviceTemplate.from_dict(s) for s in e.get("services", []))
        entries.append(RegistryEntry(e["application_name"], services, bool(e.get("verified", False))))
    return Registry(entries)


# -- composition --------------------------------------------------------------


@dataclass(frozen=True)
class ResolvedService:
    template: MicroserviceTemplate
    pod_name: str
    params: dict[str, Any]
    config: dict[str, Any]
    publishes: tuple[str, ...]
    subscribes: tuple[str, ...]
    node_selector: str | None
    role: str | None


def _expand(template: str, variables: dict[str, Any], defer: Sequence[str] = ()) -> list[str]:
    """Format ``template``; list-valued fields expand into one string per element."""
    fields = [f for _, f, _, _ in string.Formatter().parse(template) if f]
    missing = [f for f in fields if f not in variables and f not in defer]
    if missing:
        raise CompositionError(f"unresolved placeholder(s) {missing} in {template!r}")
    list_fields = sorted({f for f in fields if isinstance(variables.get(f), list)})
    out = []
    for combo in product(*(variables[f] for f in list_fields)):
        local = {**variables, **dict(zip(list_fields, combo))}
        for d in defer:
            local.setdefault(d, "{" + d + "}")
        out.append(template.format(**local))
    return out


def _fill(value: Any, variables: dict[str, Any]) -> Any:
    if isinstance(value, str):
        fields = [f for _, f, _, _ in string.Formatter().parse(value) if f]
        if len(fields) == 1 and value == "{" + fields[0] + "}" and fields[0] in variables:
            return variables[fields[0]]
        if not fields:
            return value
        expanded = _expand(value, variables, defer=(SINK_NODE,))
        return expanded[0] if len(expanded) == 1 else expanded
    if isinstance(value, list):
        return [_fill(v, variables) for v in value]
    if isinstance(value, dict):
        return {k: _fill(v, variables) for k, v in value.items()}
    return value


def _replica_params(cap: CapabilityRequest) -> list[dict[str, Any]]:
    """Split list params whose length equals the count across replicas."""
    distributed = sorted(k for k, v in cap.params.items() if isinstance(v, list) and len(v) == cap.count and cap.count > 1)
    out = []
    for k in range(cap.count):
        params = {key: (val[k] if key in distributed else val) for key, val in cap.params.items()}
        params["index"] = k
        if distributed:
            params["id"] = cap.params[distributed[0]][k]
        out.append(params)
    return out


def compose(
    required_capabilities: Sequence[CapabilityRequest],
    registry: Registry,
    context: dict[str, Any] | None = None,
) -> list[ResolvedService]:
    if len(registry) == 0:
        raise CompositionError("registry is empty")
    context = dict(context or {})
    services: list[ResolvedService] = []
    used_names: set[str] = set()
    for cap in required_capabilities:
        candidates = registry.candidates(cap.tag)
        if not candidates:
            unverified = registry.candidates(cap.tag, verified_only=False)
            why = "only unverified templates" if unverified else "no template"
            raise CompositionError(f"capability {cap.tag!r}: {why}")
        tmpl = candidates[0]
        for params in _replica_params(cap):
            variables = {**context, **params}
            for key, typ in tmpl.config_params.items():
                if key in variables and not isinstance(variables[key], _TYPES[typ]):
                    raise CompositionError(f"{tmpl.name}: param {key!r} is not {typ}")
            base = f"{tmpl.name}-{params['id']}" if "id" in params else tmpl.name
            name, n = base, 1
            while name in used_names:
                name = f"{base}-{n}"
                n += 1
            used_names.add(name)
            publishes = tuple(t for tpl in tmpl.publishes for t in _expand(tpl, variables))
            subscribes = tuple(t for tpl in tmpl.subscribes for t in _expand(tpl, variables))
            for t in publishes + subscribes:
                validate_topic(t)
            config = {k: _fill(v, variables) for k, v in tmpl.config.items()}
            for key in tmpl.config_params:
                if key in variables and key not in config:
                    config[key] = variables[key]
            selector = _expand(tmpl.node_selector, variables)[0] if tmpl.node_selector else None
            services.append(
                ResolvedService(
                    template=tmpl,
                    pod_name=name,
                    params=params,
                    config=config,
                    publishes=publishes,
                    subscribes=subscribes,
                    node_selector=selector,
                    role=tmpl.default_role,
                )
            )
    return services


# -- placement ------------------------------------------------------------------


def _resolve_sink(value: Any, sink: str) -> Any:
    if isinstance(value, str):
        return value.replace("{" + SINK_NODE + "}", sink)
    if isinstance(value, list):
        return [_resolve_sink(v, sink) for v in value]
    if isinstance(value, dict):
        return {k: _resolve_sink(v, sink) for k, v in value.items()}
    return value


def place(
    app: Sequence[ResolvedService],
    view: ClusterView,
    *,
    owner: str,
    revision: int = 1,
    placement_hint: str | None = None,
    relax_roles: Sequence[str] | None = None,
    home_node: str | None = None,
    credit: dict[str, Resources] | None = None,
) -> WorkloadDefinition:
    """Assign every service a node; best fit by residual capacity, ties by node id.

    ``relax_roles`` replaces each role constraint by an ordered list of roles
    (used for offloading); earlier roles win over a tighter fit. ``credit`` adds capacity back per node, e.g. for
    pods that the new revision replaces.
    """
    residual = {n.node_id: view.residual(n.node_id) + (credit or {}).get(n.node_id, Resources()) for n in view.nodes}
    ready = {n.node_id: n.ready for n in view.nodes}
    roles = {n.node_id: n.role for n in view.nodes}
    chosen: dict[str, str] = {}
    # data sinks first so bridges can be pointed at them
    order = sorted(range(len(app)), key=lambda i: app[i].template.behavior_kind == "bridge")
    for i in order:
        svc = app[i]
        need = svc.template.resource_request
        if svc.node_selector is not None:
            node = svc.node_selector
            if node not in residual:
                raise PlacementError(f"{svc.pod_name}: unknown node {node!r}")
            if not need.fits_in(residual[node]):
                raise PlacementError(f"{svc.pod_name}: no capacity on {node}")
        else:
            role = placement_hint if (placement_hint and svc.template.behavior_kind != "bridge") else svc.role
            # relaxed roles are tried in the order given, best fit within a role
            tiers = list(relax_roles) if relax_roles is not None else ([role] if role else sorted(set(roles.values())))
            rank = {r: (i if relax_roles is not None else 0) for i, r in enumerate(tiers)}
            best = None
            for node_id in sorted(residual):
                if roles[node_id] not in rank or not ready[node_id] or not need.fits_in(residual[node_id]):
                    continue
                left = residual[node_id] - need
                key = (rank[roles[node_id]], left.cpu_milli, left.mem_mib, node_id)
                if best is None or key < best:
                    best = key
            if best is None:
                raise PlacementError(f"{svc.pod_name}: no feasible node with role in {sorted(rank)}")
            node = best[3]
        residual[node] = residual[node] - need
        chosen[svc.pod_name] = node

    sink = next((chosen[s.pod_name] for s in app if s.template.behavior_kind != "bridge"), home_node)
    pods = []
    for svc in app:
        tmpl = svc.template
        pods.append(
            PodSpec(
                pod_name=svc.pod_name,
                image_ref=tmpl.image_ref,
                resource_request=tmpl.resource_request,
                behavior_kind=tmpl.behavior_kind,
                target_node=chosen[svc.pod_name],
                config=_resolve_sink(svc.config, sink or ""),
                topic_bindings={"publishes": list(svc.publishes), "subscribes": list(svc.subscribes)},
                startup_latency=None if tmpl.startup_latency is None else seconds(tmpl.startup_latency),
            )
        )
    return WorkloadDefinition(owner=owner, revision=revision, pods=tuple(pods))


# -- lifecycle --------------------------------------------------------------------

PENDING_APP = "pending"
DEPLOYING = "deploying"
RUNNING_APP = "running"
TERMINATING_APP = "terminating"
TERMINATED_APP = "terminated"
POSTPONED = "postponed"


@dataclass
class ApplicationInstance:
    instance_id: str
    correlation_key: str
    request_id: str
    workload_revision: int = 0
    state: str = PENDING_APP
    owned_pods: list[str] = field(default_factory=list)
    td: TaskDescription | None = None
    applied_at: int | None = None
    running_at: int | None = None
    terminating_at: int | None = None
    terminated_at: int | None = None
    retries: int = 0

    @property
    def live(self) -> bool:
        return self.state != TERMINATED_APP


@dataclass(frozen=True)
class Decision:
    kind: str
    reason: str
    workload: WorkloadDefinition | None = None
    retry_at: int | None = None
    request_id: str = ""
    correlation_key: str = ""
    intent: str = ""
    instance_id: str | None = None
    decided_at: int = 0
    translation_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("accepted", "postponed", "rejected"):
            raise ValueError(f"bad decision kind {self.kind!r}")
        if self.kind == "postponed" and self.retry_at is None:
            raise ValueError("postponed decisions need retry_at")
        if self.kind == "accepted" and self.workload is None:
            raise ValueError("accepted decisions need a workload")

    def as_dict(self, wall_clock: bool = True) -> dict:
        out = {
            "kind": self.kind,
            "reason": self.reason,
            "request_id": self.request_id,
            "correlation_key": self.correlation_key,
            "intent": self.intent,
            "instance_id": self.instance_id,
            "decided_at": self.decided_at / SECOND,
            "retry_at": None if self.retry_at is None else self.retry_at / SECOND,
            "pods": [] if self.workload is None else [p.pod_name for p in self.workload.pods],
        }
        if wall_clock:
            out["translation_ms"] = self.translation_ms
        return out


class AppManager:
    def __init__(
        self,
        kernel: Kernel,
        plane: ControlPlane,
        registry: Registry,
        *,
        name: str = "manager",
        bus: Bus | None = None,
        home_node: str | None = None,
        issuer: str | None = None,
        strategy: str = "postpone",
        retry_interval: int = 1 * SECOND,
        max_retries: int | None = None,
        offload_roles: Sequence[str] = ("edge", "rsu", "cloud"),
        restart_on_reconfigure: bool = False,
    ) -> None:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown conflict strategy {strategy!r}")
        self.kernel = kernel
        self.plane = plane
        self.registry = registry
        self.name = name
        self.bus = bus
        self.home_node = home_node
        self.issuer = issuer
        self.strategy = strategy
        self.retry_interval = retry_interval
        self.max_retries = max_retries
        self.offload_roles = tuple(offload_roles)
        self.restart_on_reconfigure = restart_on_reconfigure
        self.instances: dict[str, ApplicationInstance] = {}
        self.decisions: list[Decision] = []
        self._seen_requests: dict[str, str] = {}
        self._n_instances = 0
        self._sub_id: int | None = None
        self._retry_handles: dict[str, Any] = {}
        plane.watch(self._on_reconcile)

    # wiring ------------------------------------------------------------------

    def attach(self) -> None:
        """Subscribe to the task topic on the home node."""
        if self.bus is None or self.home_node is None:
            raise ValueError("attach() needs a bus and a home node")
        if self._sub_id is None:
            self._sub_id = self.bus.subscribe(self.home_node, TASK_TOPIC, self._on_task_envelope)

    def detach(self) -> None:
        if self._sub_id is not None and self.bus is not None:
            self.bus.unsubscribe(self._sub_id)
            self._sub_id = None

    def _on_task_envelope(self, env: MessageEnvelope) -> None:
        try:
            td = TaskDescription.decode(env.payload)
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("%s: undecodable task description: %s", self.name, exc)
            self._record(Decision("rejected", "invalid", decided_at=self.kernel.now()), time.perf_counter())
            return
        if self.issuer is not None and td.issuer != self.issuer:
            return
        self.handle_task(td)

    # queries -----------------------------------------------------------------

    def live_instance(self, correlation_key: str) -> ApplicationInstance | None:
        for inst in self.instances.values():
            if inst.correlation_key == correlation_key and inst.live:
                return inst
        return None

    # main entry ----------------------------------------------------------------

    def handle_task(self, td: TaskDescription) -> Decision:
        started = time.perf_counter()
        problems = td.problems()
        if problems:
            return self._record(self._decide("rejected", "invalid", td), started)
        if td.intent == "deploy":
            return self._record(self._deploy(td), started)
        if td.intent == "shutdown":
            return self._record(self._shutdown(td.correlation_key, td), started)
        return self._record(self._reconfigure(td), started)

    def _decide(self, kind: str, reason: str, td: TaskDescription | None, **kw: Any) -> Decision:
        fields = {
            "request_id": td.request_id if td else "",
            "correlation_key": td.correlation_key if td else "",
            "intent": td.intent if td else "shutdown",
        }
        fields.update(kw)
        return Decision(kind, reason, decided_at=self.kernel.now(), **fields)

    def _record(self, decision: Decision, started: float) -> Decision:
        decision = replace(decision, translation_ms=(time.perf_counter() - started) * 1e3)
        self.decisions.append(decision)
        if self.bus is not None and self.home_node is not None:
            self.bus.publish(
                MessageEnvelope(
                    topic=DECISION_TOPIC,
                    publish_time=self.kernel.now(),
                    source_node=self.home_node,
                    schema_tag="decision",
                    payload=json.dumps(decision.as_dict(wall_clock=False), sort_keys=True).encode(),
                )
            )
        return decision

    def _deploy(self, td: TaskDescription) -> Decision:
        if td.request_id in self._seen_requests or self.live_instance(td.correlation_key) is not None:
            return self._decide("rejected", "duplicate", td)
        try:
            app = compose(td.required_capabilities, self.registry, self._context(td, "pending"))
        except CompositionError as exc:
            log.info("%s: %s", self.name, exc)
            return self._decide("rejected", "unsatisfiable", td)
        self._n_instances += 1
        inst = ApplicationInstance(f"{self.name}-app-{self._n_instances}", td.correlation_key, td.request_id, td=td)
        # compose again now that the instance id is known; selection is deterministic
        app = compose(td.required_capabilities, self.registry, self._context(td, inst.instance_id))
        decision = self._try_place(inst, app, td)
        if decision.kind == "rejected":
            self._n_instances -= 1
            return decision
        self.instances[inst.instance_id] = inst
        self._seen_requests[td.request_id] = inst.instance_id
        return decision

    def _context(self, td: TaskDescription, instance_id: str) -> dict[str, Any]:
        return {
            "correlation_key": td.correlation_key,
            "instance": instance_id,
            "key_slug": td.correlation_key.replace(":", "_"),
        }

    def _try_place(self, inst: ApplicationInstance, app: list[ResolvedService], td: TaskDescription) -> Decision:
        view = self.plane.cluster_view()
        revision = inst.workload_revision + 1
        try:
            workload = place(
                app, view, owner=inst.instance_id, revision=revision,
                placement_hint=td.placement_hint, home_node=self.home_node,
            )
        except PlacementError as exc:
            log.info("%s: placement failed for %s: %s", self.name, inst.instance_id, exc)
            return self.resolve_conflict(inst, app, view, td, self.strategy)
        return self._apply(inst, workload, td, "placed")

    def _apply(self, inst: ApplicationInstance, workload: WorkloadDefinition, td: TaskDescription, reason: str) -> Decision:
        try:
            self.plane.apply(workload)
        except AdmissionError as exc:
            log.info("%s: admission refused for %s: %s", self.name, inst.instance_id, exc)
            return self._postpone(inst, td, "admission-refused")
        inst.workload_revision = workload.revision
        inst.owned_pods = [f"{inst.instance_id}/{p.pod_name}" for p in workload.pods]
        inst.state = DEPLOYING
        inst.applied_at = self.kernel.now()
        inst.running_at = None
        return self._decide("accepted", reason, td, workload=workload, instance_id=inst.instance_id)

    def resolve_conflict(
        self,
        inst: ApplicationInstance,
        app: list[ResolvedService],
        view: ClusterView,
        td: TaskDescription,
        strategy: str,
    ) -> Decision:
        if strategy == "cancel":
            inst.state = TERMINATED_APP
            return self._decide("rejected", "no-capacity", td)
        if strategy == "offload":
            try:
                workload = place(
                    app, view, owner=inst.instance_id, revision=inst.workload_revision + 1,
                    relax_roles=self.offload_roles, home_node=self.home_node,
                )
            except PlacementError:
                return self._postpone(inst, td, "offload-infeasible")
            return self._apply(inst, workload, td, "offloaded")
        return self._postpone(inst, td, "no-capacity")

    def _postpone(self, inst: ApplicationInstance, td: TaskDescription, reason: str) -> Decision:
        if self.max_retries is not None and inst.retries >= self.max_retries:
            inst.state = TERMINATED_APP
            return self._decide("rejected", "retries-exhausted", td)
        inst.state = POSTPONED
        retry_at = self.kernel.now() + self.retry_interval
        self._retry_handles[inst.instance_id] = self.kernel.schedule(self._retry, retry_at, inst.instance_id)
        return self._decide("postponed", reason, td, retry_at=retry_at, instance_id=inst.instance_id)

    def _retry(self, instance_id: str) -> None:
        self._retry_handles.pop(instance_id, None)
        inst = self.instances.get(instance_id)
        if inst is None or inst.state != POSTPONED or inst.td is None:
            return
        inst.retries += 1
        started = time.perf_counter()
        app = compose(inst.td.required_capabilities, self.registry, self._context(inst.td, instance_id))
        decision = self._try_place(inst, app, inst.td)
        if decision.kind == "rejected":
            inst.state = TERMINATED_APP
        self._record(decision, started)

    def _reconfigure(self, td: TaskDescription) -> Decision:
        inst = self.live_instance(td.correlation_key)
        if inst is None or inst.state in (TERMINATING_APP, POSTPONED):
            return self._decide("rejected", "not-found", td)
        try:
            app = compose(td.required_capabilities, self.registry, self._context(td, inst.instance_id))
        except CompositionError:
            return self._decide("rejected", "unsatisfiable", td)
        revision = inst.workload_revision + 1
        if self.restart_on_reconfigure:
            app = [replace(s, pod_name=f"{s.pod_name}-r{revision}") for s in app]
        view = self.plane.cluster_view()
        credit: dict[str, Resources] = {}
        for pod in view.pods_of(inst.instance_id):
            if pod.phase != TERMINATED and pod.node_id is not None:
                credit[pod.node_id] = credit.get(pod.node_id, Resources()) + pod.request
        try:
            workload = place(
                app, view, owner=inst.instance_id, revision=revision,
                placement_hint=td.placement_hint, home_node=self.home_node, credit=credit,
            )
            self.plane.apply(workload)
        except (PlacementError, AdmissionError):
            return self._decide("rejected", "no-capacity", td)
        inst.workload_revision = revision
        inst.owned_pods = [f"{inst.instance_id}/{p.pod_name}" for p in workload.pods]
        inst.td = replace(inst.td or td, required_capabilities=td.required_capabilities)
        return self._decide("accepted", "reconfigured", td, workload=workload, instance_id=inst.instance_id)

    def shutdown(self, correlation_key: str) -> Decision:
        started = time.perf_counter()
        return self._record(self._shutdown(correlation_key, None), started)

    def _shutdown(self, correlation_key: str, td: TaskDescription | None) -> Decision:
        key = {"correlation_key": correlation_key} if td is None else {}
        inst = self.live_instance(correlation_key)
        if inst is None or inst.state == TERMINATING_APP:
            return self._decide("rejected", "not-found", td, **key)
        if inst.state == POSTPONED:
            handle = self._retry_handles.pop(inst.instance_id, None)
            if handle is not None:
                self.kernel.cancel(handle)
            inst.state = TERMINATED_APP
            inst.terminated_at = self.kernel.now()
            self._release(inst)
            # nothing was ever applied, so the empty workload is not submitted
            empty = WorkloadDefinition(owner=inst.instance_id, revision=inst.workload_revision + 1, pods=())
            return self._decide(
                "accepted", "cancelled-postponed", td, workload=empty, instance_id=inst.instance_id, **key
            )
        revision = inst.workload_revision + 1
        workload = WorkloadDefinition(owner=inst.instance_id, revision=revision, pods=())
        self.plane.apply(workload)
        inst.workload_revision = revision
        inst.state = TERMINATING_APP
        inst.terminating_at = self.kernel.now()
        return self._decide("accepted", "terminating", td, workload=workload, instance_id=inst.instance_id, **key)

    def shutdown_all(self) -> list[Decision]:
        """Tear down every live instance this manager owns (transitive cleanup)."""
        out = []
        for inst in list(self.instances.values()):
            if inst.live and inst.state != TERMINATING_APP:
                out.append(self.shutdown(inst.correlation_key))
        return out

    def _release(self, inst: ApplicationInstance) -> None:
        self._seen_requests.pop(inst.request_id, None)

    def _on_reconcile(self, report: ReconcileReport) -> None:
        if not report.transitions:
            return
        now = report.tick_time
        for inst in self.instances.values():
            if inst.state == DEPLOYING:
                if inst.owned_pods and all(self.plane.pod(p).phase == RUNNING for p in inst.owned_pods):
                    inst.state = RUNNING_APP
                    inst.running_at = now
            elif inst.state == TERMINATING_APP:
                if all(self.plane.pod(p).phase == TERMINATED for p in inst.owned_pods):
                    inst.state = TERMINATED_APP
                    inst.terminated_at = now
                    self._release(inst)

