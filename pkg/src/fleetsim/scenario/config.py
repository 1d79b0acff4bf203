"""Scenario configuration: loading, defaults and validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from fleetsim.app_manager import STRATEGIES, Registry, load_registry
from fleetsim.control_plane import Topology, load_topology
from fleetsim.scenario.motion import Route, Waypoint

DATA_DIR = Path(str(resources.files("fleetsim") / "data"))
DEFAULT_CONFIG = DATA_DIR / "default.json"


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[str]) -> None:
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


@dataclass
class RouteSpec:
    vehicle_id: int
    waypoints: list[Waypoint]

    def build(self) -> Route:
        return Route(self.waypoints)


@dataclass
class FaultSpec:
    """Fail the first Running pod whose name starts with ``pod_name`` at ``at`` seconds."""

    at: float
    pod_name: str


@dataclass
class ScenarioConfig:
    N: int = 15
    M: int = 2
    f_p: float = 100.0
    f_pc: float = 10.0
    d_start: float = 400.0
    d_stop: float = 500.0
    duration: float = 90.0
    seed: int = 0
    routes: list[RouteSpec] = field(default_factory=list)
    cluster: Any = "topology.json"
    registry: Any = "registry.json"
    points_per_cloud: int = 1000
    startup_latency: float = 5.0
    reconcile_interval: float = 0.25
    termination_latency: float = 0.5
    analysis_period: float = 0.1
    buffer_duration: float = 15.0
    conflict_strategy: str = "postpone"
    retry_interval: float = 1.0
    restart_on_reconfigure: bool = False
    operator_capability: str = "proximity-operator"
    operator_rules: list[dict] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)
    base_dir: Path = field(default=DATA_DIR, repr=False, compare=False)

    # resolved references --------------------------------------------------

    def topology(self) -> Topology:
        return load_topology(self._resolve(self.cluster))

    def load_registry(self) -> Registry:
        return load_registry(self._resolve(self.registry))

    def _resolve(self, ref: Any) -> Any:
        if isinstance(ref, dict):
            return ref
        path = Path(ref)
        if path.is_absolute():
            return path
        local = self.base_dir / path
        # bare names of shipped files resolve even from other directories
        return local if local.exists() or not (DATA_DIR / path).exists() else DATA_DIR / path

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        for r in out["routes"]:
            r["waypoints"] = [dict(w) for w in r["waypoints"]]
        return out


_FIELDS = {f for f in ScenarioConfig.__dataclass_fields__ if f != "base_dir"}


def from_dict(obj: dict, base_dir: Path | None = None) -> ScenarioConfig:
    unknown = sorted(set(obj) - _FIELDS)
    if unknown:
        raise ConfigError([f"unknown config field(s): {', '.join(unknown)}"])
    data = dict(obj)
    try:
        data["routes"] = [
            RouteSpec(int(r["vehicle_id"]), [Waypoint(float(w["x"]), float(w["y"]), float(w.get("speed", 10.0))) for w in r["waypoints"]])
            for r in obj.get("routes", [])
        ]
        data["faults"] = [FaultSpec(float(f["at"]), str(f["pod_name"])) for f in obj.get("faults", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError([f"malformed routes/faults: {exc}"]) from exc
    cfg = ScenarioConfig(**data)
    if base_dir is not None:
        cfg.base_dir = base_dir
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    if not isinstance(obj, dict):
        raise ConfigError([f"config {path} is not an object"])
    return from_dict(obj, base_dir=path.resolve().parent)


def default_config() -> ScenarioConfig:
    return load_config(DEFAULT_CONFIG)


def _number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def validate_config(cfg: ScenarioConfig) -> list[str]:
    """Return human-readable diagnostics; empty means the config is runnable."""
    diags: list[str] = []
    for name in ("N", "M", "seed", "points_per_cloud"):
        if not isinstance(getattr(cfg, name), int) or isinstance(getattr(cfg, name), bool):
            diags.append(f"{name} must be an integer")
    for name in ("f_p", "f_pc", "d_start", "d_stop", "duration", "startup_latency", "reconcile_interval",
                 "termination_latency", "analysis_period", "buffer_duration", "retry_interval"):
        if not _number(getattr(cfg, name)):
            diags.append(f"{name} must be a finite number")
    if diags:
        return diags

    if cfg.N < 1:
        diags.append("N must be at least 1")
    if cfg.M < 0:
        diags.append("M must be non-negative")
    if cfg.M > cfg.N:
        diags.append("M ≤ N violated")
    if not cfg.d_stop > cfg.d_start:
        diags.append("d_stop must exceed d_start")
    if cfg.d_start < 0:
        diags.append("d_start must be non-negative")
    if cfg.f_p <= 0:
        diags.append("f_p must be positive")
    if cfg.f_pc <= 0:
        diags.append("f_pc must be positive")
    if cfg.duration <= 0:
        diags.append("duration must be positive")
    if cfg.seed < 0:
        diags.append("seed must be non-negative")
    if cfg.points_per_cloud < 1:
        diags.append("points_per_cloud must be at least 1")
    for name in ("reconcile_interval", "analysis_period", "buffer_duration", "retry_interval"):
        if getattr(cfg, name) <= 0:
            diags.append(f"{name} must be positive")
    for name in ("startup_latency", "termination_latency"):
        if getattr(cfg, name) < 0:
            diags.append(f"{name} must be non-negative")
    if cfg.buffer_duration < 2 * cfg.analysis_period:
        diags.append("buffer_duration must be at least 2 × analysis_period")
    if cfg.conflict_strategy not in STRATEGIES:
        diags.append(f"conflict_strategy must be one of {', '.join(STRATEGIES)}")

    seen: set[int] = set()
    for r in cfg.routes:
        if not 0 <= r.vehicle_id < cfg.N:
            diags.append(f"route for unknown vehicle {r.vehicle_id}")
        if r.vehicle_id in seen:
            diags.append(f"duplicate route for vehicle {r.vehicle_id}")
        seen.add(r.vehicle_id)
        if len(r.waypoints) < 2:
            diags.append(f"route for vehicle {r.vehicle_id} needs at least 2 waypoints")
        for w in r.waypoints:
            if not (math.isfinite(w.x) and math.isfinite(w.y)):
                diags.append(f"route for vehicle {r.vehicle_id} has a non-finite waypoint")
                break
        if any(not w.speed > 0 for w in r.waypoints[:-1]):
            diags.append(f"route for vehicle {r.vehicle_id} has a non-positive leg speed")

    try:
        topo = cfg.topology()
    except (OSError, ValueError, KeyError, TypeError) as exc:
        diags.append(f"cannot load cluster topology: {exc}")
    else:
        roles = {n.node_id: n.role for n in topo.nodes}
        if len(roles) != len(topo.nodes):
            diags.append("duplicate node_id in topology")
        if "cloud" not in roles.values():
            diags.append("topology has no cloud node")
        missing = [i for i in range(cfg.N) if roles.get(f"vehicle-{i}") != "vehicle"]
        if missing:
            diags.append(f"topology lacks vehicle nodes for vehicles {missing}")
        for link in topo.links:
            if link.endpoint_a not in roles or link.endpoint_b not in roles:
                diags.append(f"link {link.endpoint_a}<->{link.endpoint_b} references an unknown node")
            if link.latency < 0:
                diags.append(f"link {link.endpoint_a}<->{link.endpoint_b} has negative latency")

    try:
        registry = cfg.load_registry()
    except (OSError, ValueError, KeyError, TypeError) as exc:
        diags.append(f"cannot load registry: {exc}")
    else:
        for tag in ("pose-uplink", cfg.operator_capability):
            if not registry.candidates(tag):
                diags.append(f"registry has no verified template for {tag!r}")

    for rule in cfg.operator_rules:
        if not isinstance(rule, dict) or "event_type" not in rule or "intent" not in rule:
            diags.append("operator rule needs event_type and intent")
    for f in cfg.faults:
        if not 0 <= f.at <= cfg.duration:
            diags.append(f"fault at {f.at}s lies outside the run")
    return diags
