import json
from pathlib import Path

import pytest

from fleetsim.scenario.config import DATA_DIR

SCHEMA = json.loads((DATA_DIR / "report_schema.json").read_text())


@pytest.fixture
def default_dict():
    return json.loads((DATA_DIR / "default.json").read_text())


def write_config(tmp_path: Path, obj: dict, name: str = "scenario.json") -> Path:
    """Write a config next to copies of the shipped topology and registry."""
    obj = dict(obj)
    for key, fname in (("cluster", "topology.json"), ("registry", "registry.json")):
        ref = obj.get(key, fname)
        if isinstance(ref, str) and not Path(ref).is_absolute():
            obj[key] = str(DATA_DIR / ref)
    path = tmp_path / name
    path.write_text(json.dumps(obj, indent=2))
    return path


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """The shipped default scenario, run once per session: (simulation, report dict, out dir)."""
    import time

    from fleetsim.scenario.config import default_config
    from fleetsim.scenario.runner import Simulation

    out = tmp_path_factory.mktemp("default_run")
    sim = Simulation(default_config(), out)
    started = time.perf_counter()
    report = sim.run().to_dict()
    sim.total_wall_s = time.perf_counter() - started
    return sim, report, out


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
