from fleetsim.scenario.config import (
    ConfigError,
    ScenarioConfig,
    default_config,
    from_dict,
    load_config,
    validate_config,
)
from fleetsim.scenario.motion import Fleet, Pose, Route, Waypoint
from fleetsim.scenario.payloads import PointCloud, decode_pose, encode_pose, synth_cloud
from fleetsim.scenario.proximity import PairState, ProximityAnalyzer
from fleetsim.scenario.runner import ScenarioReport, Simulation, run_scenario, strip_wall_clock

__all__ = [
    "ConfigError",
    "Fleet",
    "PairState",
    "PointCloud",
    "Pose",
    "ProximityAnalyzer",
    "Route",
    "ScenarioConfig",
    "ScenarioReport",
    "Simulation",
    "Waypoint",
    "decode_pose",
    "default_config",
    "encode_pose",
    "from_dict",
    "load_config",
    "run_scenario",
    "strip_wall_clock",
    "synth_cloud",
    "validate_config",
]
